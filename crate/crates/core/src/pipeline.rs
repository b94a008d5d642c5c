//! Glue between the scene, the appearance model and the rasterizer.

use nalgebra::Matrix3;
use ndarray::Array2;

use crate::appearance::{
    cache_appearance, decode_colors, style_transfer_features, AppearanceModel, AppearanceOptions,
};
use crate::camera::{project_gaussian, Camera, ProjectedGaussian};
use crate::error::Result;
use crate::frame::Image;
use crate::rasterizer::{render, RenderInput, RenderOutput};
use crate::scene::GaussianCloud;

/// World covariances and screen-space projections of a cloud for one camera.
pub struct CloudProjection {
    pub covariances: Vec<Matrix3<f64>>,
    pub projected: Vec<ProjectedGaussian>,
}

pub fn project_cloud(cloud: &GaussianCloud, camera: &Camera) -> Result<CloudProjection> {
    let covariances = cloud
        .points
        .iter()
        .map(|p| p.covariance())
        .collect::<Result<Vec<_>>>()?;
    let projected = cloud
        .points
        .iter()
        .zip(&covariances)
        .map(|(p, s)| project_gaussian(&p.position, s, camera))
        .collect();
    Ok(CloudProjection {
        covariances,
        projected,
    })
}

/// Renders a cloud with explicit per-point colors.
pub fn render_with_colors(
    cloud: &GaussianCloud,
    colors: Vec<[f64; 3]>,
    camera: &Camera,
    background: [f64; 3],
) -> Result<RenderOutput> {
    let proj = project_cloud(cloud, camera)?;
    let opacity = cloud.points.iter().map(|p| p.opacity()).collect();
    render(&RenderInput::new(
        proj.projected,
        opacity,
        colors,
        camera.width,
        camera.height,
        background,
    ))
}

/// Where the dynamic appearance comes from.
#[derive(Clone, Copy)]
pub struct Reference<'a> {
    pub image: &'a Image,
    /// Pose of the reference image; `None` only makes sense with `transfer`.
    pub camera: Option<&'a Camera>,
    /// Tuning weight applied to the dynamic feature.
    pub weight: f64,
    /// Zero the projection feature map (unposed reference).
    pub transfer: bool,
}

/// Per-point appearance features for a reference image.
pub fn reference_appearance(
    cloud: &GaussianCloud,
    model: &AppearanceModel,
    reference: &Reference<'_>,
    options: AppearanceOptions,
) -> Result<Array2<f64>> {
    let mut stack = model.extractor.extract(reference.image);
    if reference.transfer {
        stack = style_transfer_features(&stack);
    }
    let camera = if reference.transfer {
        None
    } else {
        reference.camera
    };
    cache_appearance(cloud, &stack, camera, &model.fusion, reference.weight, options)
}

/// Renders a novel view from precomputed appearance features.
pub fn render_cached(
    cloud: &GaussianCloud,
    model: &AppearanceModel,
    af: &Array2<f64>,
    camera: &Camera,
    background: [f64; 3],
) -> Result<Image> {
    let colors = decode_colors(cloud, af, camera, &model.fusion)?;
    Ok(render_with_colors(cloud, colors, camera, background)?.image)
}

/// Renders a novel view, recomputing the appearance features for this frame.
pub fn render_uncached(
    cloud: &GaussianCloud,
    model: &AppearanceModel,
    reference: &Reference<'_>,
    options: AppearanceOptions,
    camera: &Camera,
    background: [f64; 3],
) -> Result<Image> {
    let af = reference_appearance(cloud, model, reference, options)?;
    render_cached(cloud, model, &af, camera, background)
}
