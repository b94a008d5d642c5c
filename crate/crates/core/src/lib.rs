//! CPU Gaussian splatting with separated intrinsic and dynamic per-point
//! appearance features, trainable from photo collections with varying
//! appearance and transient occluders.

pub mod appearance;
pub mod camera;
pub mod dataio;
pub mod error;
pub mod frame;
pub mod gradcheck;
pub mod losses;
pub mod optim;
pub mod pipeline;
pub mod rasterizer;
pub mod scene;

pub use error::{Error, Result};
