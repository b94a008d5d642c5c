//! Per-point appearance: feature extraction from a reference image, dynamic
//! feature assembly, fusion with the intrinsic feature, and color decoding.

pub mod checkpoint;
pub mod extractor;
pub mod fusion;
pub mod nn;
pub mod sampling;

use nalgebra::{Vector2, Vector3};
use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

pub use extractor::{ExtractorNet, FeatureStack};
pub use fusion::{decode_color, fuse, DecoderInput, FusionNets};
pub use sampling::{bilinear_sample, bilinear_sample_backward};

use crate::camera::{normalized_projection, normalized_projection_backward, Camera};
use crate::error::{Error, Result};
use crate::scene::{GaussianCloud, GaussianPoint, SF_DIM};
use nn::Parameterized;

/// Channels per feature map.
pub const FEATURE_CHANNELS: usize = 16;
/// Length of the fused appearance feature.
pub const AF_DIM: usize = 48;
pub const PE_FREQUENCIES: usize = 10;
pub const DROPOUT_PROBABILITY: f64 = 0.1;

/// Ablation switches. Everything enabled is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AppearanceOptions {
    pub use_k_maps: bool,
    pub use_projection_map: bool,
    pub use_intrinsic: bool,
}

impl Default for AppearanceOptions {
    fn default() -> Self {
        Self {
            use_k_maps: true,
            use_projection_map: true,
            use_intrinsic: true,
        }
    }
}

/// Feature extractor plus fusion and decoder networks.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceModel {
    pub extractor: ExtractorNet,
    pub fusion: FusionNets,
}

impl AppearanceModel {
    pub fn new<R: Rng + ?Sized>(k: usize, decoder_input: DecoderInput, rng: &mut R) -> Self {
        Self {
            extractor: ExtractorNet::new(k, rng),
            fusion: FusionNets::new(k, decoder_input, rng),
        }
    }

    pub fn k(&self) -> usize {
        self.fusion.k
    }
}

/// The returned stack has F^P zeroed; the K maps and the visibility map are
/// untouched. Rendering with it needs no pose for the reference image.
pub fn style_transfer_features(stack: &FeatureStack) -> FeatureStack {
    let mut out = stack.clone();
    out.projection.fill(0.0);
    out
}

/// `df = w · (f^P ⊕ f¹ ⊕ … ⊕ f^K)` for one point, without dropout.
///
/// `camera` is the reference view; `None` (or a point outside the frustum)
/// yields a zero f^P.
pub fn assemble_dynamic_feature(
    point: &GaussianPoint,
    stack: &FeatureStack,
    camera: Option<&Camera>,
    weight: f64,
) -> Result<Vec<f64>> {
    if point.sampling.len() != stack.k() {
        return Err(Error::contract(format!(
            "point has {} sampling coordinates, stack has {} maps",
            point.sampling.len(),
            stack.k()
        )));
    }
    let mut df = vec![0.0; FEATURE_CHANNELS * (stack.k() + 1)];
    if let Some(uv) = camera.and_then(|c| normalized_projection(&point.position, c)) {
        sampling::bilinear_sample_into(&stack.projection, &uv, &mut df[..FEATURE_CHANNELS]);
    }
    for (k, sc) in point.sampling.iter().enumerate() {
        let start = FEATURE_CHANNELS * (k + 1);
        sampling::bilinear_sample_into(
            &stack.maps[k],
            &Vector2::new(sc[0], sc[1]),
            &mut df[start..start + FEATURE_CHANNELS],
        );
    }
    for v in &mut df {
        *v *= weight;
    }
    Ok(df)
}

/// Dynamic features for a whole cloud, with what the backward pass needs.
pub struct DynamicBatch {
    /// (N, 16 (K + 1))
    pub values: Array2<f64>,
    projections: Vec<Option<Vector2<f64>>>,
    /// Inverted-dropout multipliers (0 or 1 / (1 - p)), training only.
    dropout: Option<Array2<f64>>,
    weight: f64,
    options: AppearanceOptions,
}

impl DynamicBatch {
    pub fn assemble(
        cloud: &GaussianCloud,
        stack: &FeatureStack,
        camera: Option<&Camera>,
        weight: f64,
        options: AppearanceOptions,
        dropout_rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Self> {
        if cloud.k != stack.k() {
            return Err(Error::contract(format!(
                "cloud K = {} but feature stack has {} maps",
                cloud.k,
                stack.k()
            )));
        }
        let k = cloud.k;
        let dim = FEATURE_CHANNELS * (k + 1);
        let n = cloud.len();
        let mut values = Array2::zeros((n, dim));
        let mut projections = Vec::with_capacity(n);
        for (i, p) in cloud.points.iter().enumerate() {
            let mut row = values.row_mut(i);
            let row = row.as_slice_mut().expect("row-major");
            let uv = if options.use_projection_map {
                camera.and_then(|c| normalized_projection(&p.position, c))
            } else {
                None
            };
            if let Some(uv) = uv {
                sampling::bilinear_sample_into(&stack.projection, &uv, &mut row[..FEATURE_CHANNELS]);
            }
            projections.push(uv);
            if options.use_k_maps {
                for (kk, sc) in p.sampling.iter().enumerate() {
                    let start = FEATURE_CHANNELS * (kk + 1);
                    sampling::bilinear_sample_into(
                        &stack.maps[kk],
                        &Vector2::new(sc[0], sc[1]),
                        &mut row[start..start + FEATURE_CHANNELS],
                    );
                }
            }
        }
        values *= weight;
        let dropout = dropout_rng.map(|rng| {
            let keep = 1.0 / (1.0 - DROPOUT_PROBABILITY);
            Array2::from_shape_fn((n, dim), |_| {
                if rng.random::<f64>() < DROPOUT_PROBABILITY {
                    0.0
                } else {
                    keep
                }
            })
        });
        if let Some(mask) = &dropout {
            values *= mask;
        }
        Ok(Self {
            values,
            projections,
            dropout,
            weight,
            options,
        })
    }

    /// Routes dL/ddf into the feature maps, positions (through the
    /// projection) and sampling coordinates.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        cloud: &GaussianCloud,
        stack: &FeatureStack,
        camera: Option<&Camera>,
        d_values: ArrayView2<f64>,
        d_stack: &mut FeatureStack,
        d_positions: &mut [Vector3<f64>],
        d_sampling: &mut [Vec<[f64; 2]>],
    ) {
        let mut d = d_values.to_owned() * self.weight;
        if let Some(mask) = &self.dropout {
            d *= mask;
        }
        for (i, p) in cloud.points.iter().enumerate() {
            let row = d.row(i);
            let row = row.as_slice().expect("row-major");
            if let (Some(uv), Some(cam)) = (self.projections[i], camera) {
                let d_uv = bilinear_sample_backward(
                    &stack.projection,
                    &uv,
                    &row[..FEATURE_CHANNELS],
                    &mut d_stack.projection,
                );
                d_positions[i] += normalized_projection_backward(&p.position, cam, &d_uv);
            }
            if self.options.use_k_maps {
                for (kk, sc) in p.sampling.iter().enumerate() {
                    let start = FEATURE_CHANNELS * (kk + 1);
                    let d_uv = bilinear_sample_backward(
                        &stack.maps[kk],
                        &Vector2::new(sc[0], sc[1]),
                        &row[start..start + FEATURE_CHANNELS],
                        &mut d_stack.maps[kk],
                    );
                    d_sampling[i][kk][0] += d_uv.x;
                    d_sampling[i][kk][1] += d_uv.y;
                }
            }
        }
    }
}

/// Stacks the intrinsic features as (N, 48); zeros when separation is off.
pub fn intrinsic_matrix(cloud: &GaussianCloud, options: AppearanceOptions) -> Array2<f64> {
    let mut m = Array2::zeros((cloud.len(), SF_DIM));
    if options.use_intrinsic {
        for (i, p) in cloud.points.iter().enumerate() {
            m.row_mut(i)
                .as_slice_mut()
                .expect("row-major")
                .copy_from_slice(&p.intrinsic);
        }
    }
    m
}

pub fn positions(cloud: &GaussianCloud) -> Vec<Vector3<f64>> {
    cloud.points.iter().map(|p| p.position).collect()
}

/// Per-point af for a reference image's feature stack: (N, 48).
pub fn cache_appearance(
    cloud: &GaussianCloud,
    stack: &FeatureStack,
    reference_camera: Option<&Camera>,
    nets: &FusionNets,
    weight: f64,
    options: AppearanceOptions,
) -> Result<Array2<f64>> {
    let df = DynamicBatch::assemble(cloud, stack, reference_camera, weight, options, None)?;
    let inputs = nets.fuse_inputs(&intrinsic_matrix(cloud, options), &df.values, &positions(cloud))?;
    Ok(nets.fuse_batch(inputs))
}

/// Colors for a novel viewpoint from cached af.
pub fn decode_colors(
    cloud: &GaussianCloud,
    af: &Array2<f64>,
    camera: &Camera,
    nets: &FusionNets,
) -> Result<Vec<[f64; 3]>> {
    if af.dim() != (cloud.len(), AF_DIM) {
        return Err(Error::contract(format!(
            "cached appearance has shape {:?}, expected ({}, {AF_DIM})",
            af.dim(),
            cloud.len()
        )));
    }
    let inputs = nets.decoder_inputs(af, &positions(cloud), &camera.center());
    let rgb = nets.decode_batch(inputs);
    Ok(rgb
        .rows()
        .into_iter()
        .map(|r| [r[0], r[1], r[2]])
        .collect())
}

/// Accumulated gradients for the whole appearance model.
pub fn zero_grads(model: &AppearanceModel) -> AppearanceModel {
    AppearanceModel {
        extractor: model.extractor.zeros_like(),
        fusion: model.fusion.zeros_like(),
    }
}

/// Splits a fusion input gradient row block into (d sf, d df, d PE).
pub fn split_fuse_input_grad(
    d_inputs: &Array2<f64>,
    k: usize,
) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
    let df = FEATURE_CHANNELS * (k + 1);
    (
        d_inputs.slice(s![.., ..SF_DIM]),
        d_inputs.slice(s![.., SF_DIM..SF_DIM + df]),
        d_inputs.slice(s![.., SF_DIM + df..]),
    )
}
