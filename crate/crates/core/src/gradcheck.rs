//! Central finite-difference checks for every differentiable operation.
//!
//! Each trial draws a small random instance, reduces the operation's output
//! to a scalar with random weights, and compares the analytic backward
//! against central differences over a set of input and parameter
//! coordinates.

use nalgebra::{Matrix3, Vector2, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::appearance::extractor::DOWNSAMPLE_FACTOR;
use crate::appearance::fusion::{positional_encoding, positional_encoding_backward, DecoderInput};
use crate::appearance::nn::Parameterized;
use crate::appearance::{
    assemble_dynamic_feature, bilinear_sample, bilinear_sample_backward, decode_color, fuse,
    AppearanceOptions, DynamicBatch, ExtractorNet, FeatureStack,
    FusionNets, AF_DIM, FEATURE_CHANNELS,
};
use crate::camera::{
    normalized_projection, project_covariance, project_covariance_backward, project_point,
    project_point_backward, Camera, ProjectedGaussian, Sym2,
};
use crate::error::{Error, Result};
use crate::frame::Image;
use crate::losses::{
    image_loss, image_loss_backward, l_sc, l_sc_backward, l_vm, l_vm_backward, ssim,
    ssim_backward, LossWeights,
};
use crate::rasterizer::{render, render_backward, RenderInput};
use crate::scene::{
    build_covariance_backward, covariance_from_parts, gaussian_weight, gaussian_weight_backward,
    GaussianCloud, GaussianPoint, SF_DIM,
};

pub const FD_STEP: f64 = 1e-4;
pub const MAX_RELATIVE_ERROR: f64 = 1e-3;

/// Network parameters probed per trial; the remaining ones are skipped.
const PARAMETER_PROBES: usize = 24;

/// Fresh instances drawn for one trial before giving up.
const MAX_DRAWS: usize = 100;

/// `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h` for each listed coordinate.
pub fn central_difference<F>(mut f: F, x: &[f64], indices: &[usize], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            probe[i] = x[i] + step;
            let hi = f(&probe);
            probe[i] = x[i] - step;
            let lo = f(&probe);
            probe[i] = x[i];
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

/// [`central_difference`] for piecewise-smooth functions that also report
/// their ReLU on/off pattern. Returns `None` when a stencil point changes the
/// pattern, i.e. the difference straddles a kink.
pub fn guarded_central_difference<F>(mut f: F, x: &[f64], indices: &[usize], step: f64) -> Option<Vec<f64>>
where
    F: FnMut(&[f64]) -> (f64, Vec<bool>),
{
    let (_, base) = f(x);
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        probe[i] = x[i] + step;
        let (hi, hi_pattern) = f(&probe);
        probe[i] = x[i] - step;
        let (lo, lo_pattern) = f(&probe);
        probe[i] = x[i];
        if hi_pattern != base || lo_pattern != base {
            return None;
        }
        out.push((hi - lo) / (2.0 * step));
    }
    Some(out)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffOp {
    BuildCovariance,
    GaussianWeight,
    ProjectPoint,
    ProjectCovariance,
    Render,
    ExtractFeatures,
    BilinearSample,
    AssembleDynamicFeature,
    Fuse,
    DecodeColor,
    Ssim,
    SamplingLoss,
    VisibilityLoss,
    ImageLoss,
}

impl DiffOp {
    pub const ALL: [DiffOp; 14] = [
        DiffOp::BuildCovariance,
        DiffOp::GaussianWeight,
        DiffOp::ProjectPoint,
        DiffOp::ProjectCovariance,
        DiffOp::Render,
        DiffOp::ExtractFeatures,
        DiffOp::BilinearSample,
        DiffOp::AssembleDynamicFeature,
        DiffOp::Fuse,
        DiffOp::DecodeColor,
        DiffOp::Ssim,
        DiffOp::SamplingLoss,
        DiffOp::VisibilityLoss,
        DiffOp::ImageLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DiffOp::BuildCovariance => "build_covariance",
            DiffOp::GaussianWeight => "gaussian_weight",
            DiffOp::ProjectPoint => "project_point",
            DiffOp::ProjectCovariance => "project_covariance",
            DiffOp::Render => "render",
            DiffOp::ExtractFeatures => "extract_features",
            DiffOp::BilinearSample => "bilinear_sample",
            DiffOp::AssembleDynamicFeature => "assemble_dynamic_feature",
            DiffOp::Fuse => "fuse",
            DiffOp::DecodeColor => "decode_color",
            DiffOp::Ssim => "ssim",
            DiffOp::SamplingLoss => "l_sc",
            DiffOp::VisibilityLoss => "l_vm",
            DiffOp::ImageLoss => "image_loss",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub op: DiffOp,
    pub trials: usize,
    /// Largest relative error over all trials.
    pub worst: f64,
    /// Trials whose relative error exceeded [`MAX_RELATIVE_ERROR`].
    pub failures: usize,
    /// Instances discarded because a difference stencil crossed a ReLU kink.
    pub redrawn: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.trials > 0
    }
}

/// Runs `trials` randomized checks of one operation.
pub fn check(op: DiffOp, trials: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport {
        op,
        trials,
        worst: 0.0,
        failures: 0,
        redrawn: 0,
    };
    for _ in 0..trials {
        let mut draws = 0;
        let err = loop {
            if let Some(err) = trial(op, &mut rng)? {
                break err;
            }
            draws += 1;
            if draws == MAX_DRAWS {
                return Err(Error::contract(format!(
                    "{}: no kink-free instance in {MAX_DRAWS} draws",
                    op.name()
                )));
            }
        };
        report.redrawn += draws;
        report.worst = report.worst.max(err);
        if !(err <= MAX_RELATIVE_ERROR) {
            report.failures += 1;
        }
    }
    Ok(report)
}

/// Relative error of one random instance, or `None` when the instance must
/// be redrawn.
fn trial(op: DiffOp, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let smooth = match op {
        DiffOp::ExtractFeatures => return check_extract_features(rng),
        DiffOp::Fuse => return check_fuse(rng),
        DiffOp::DecodeColor => return check_decode_color(rng),
        DiffOp::BuildCovariance => check_build_covariance(rng)?,
        DiffOp::GaussianWeight => check_gaussian_weight(rng)?,
        DiffOp::ProjectPoint => check_project_point(rng)?,
        DiffOp::ProjectCovariance => check_project_covariance(rng)?,
        DiffOp::Render => check_render(rng)?,
        DiffOp::BilinearSample => check_bilinear_sample(rng)?,
        DiffOp::AssembleDynamicFeature => check_assemble_dynamic_feature(rng)?,
        DiffOp::Ssim => check_ssim(rng)?,
        DiffOp::SamplingLoss => check_l_sc(rng),
        DiffOp::VisibilityLoss => check_l_vm(rng),
        DiffOp::ImageLoss => check_image_loss(rng)?,
    };
    Ok(Some(smooth))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

fn unit_quaternion(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let q = [normal(rng), normal(rng), normal(rng), normal(rng)];
    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    q.map(|c| c / n)
}

fn random_covariance(rng: &mut ChaCha8Rng, log_lo: f64, log_hi: f64) -> Matrix3<f64> {
    let q = unit_quaternion(rng);
    let s = Vector3::from_fn(|_, _| rng.random_range(log_lo..log_hi).exp());
    covariance_from_parts(&q, &s)
}

fn random_camera(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Result<Camera> {
    let dir = Vector3::new(normal(rng), normal(rng), normal(rng)).normalize();
    let eye = dir * rng.random_range(3.0..5.0);
    let up = if dir.z.abs() > 0.9 { Vector3::x() } else { Vector3::z() };
    let focal = rng.random_range(0.8..1.5) * width as f64;
    Camera::look_at(eye, Vector3::zeros(), up, focal, width, height)
}

fn random_image(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Image {
    let data = (0..width * height * 3).map(|_| rng.random::<f64>()).collect();
    Image::from_vec(width, height, data).expect("sized buffer")
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Grid coordinate of `uv` on an axis of `n` samples lies at least `margin`
/// away from every sample line.
fn off_grid(uv: f64, n: usize, margin: f64) -> bool {
    let g = (uv + 1.0) * 0.5 * (n as f64 - 1.0);
    (g - g.round()).abs() > margin && uv.abs() < 1.0 - 1e-3
}

fn random_off_grid_uv(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vector2<f64> {
    loop {
        let uv = Vector2::new(rng.random_range(-0.98..0.98), rng.random_range(-0.98..0.98));
        if off_grid(uv.x, w, 0.01) && off_grid(uv.y, h, 0.01) {
            return uv;
        }
    }
}

fn flat_params<P: Parameterized>(net: &P) -> Vec<f64> {
    net.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
}

fn with_params<P: Parameterized + Clone>(net: &P, values: &[f64]) -> P {
    let mut out = net.clone();
    let mut it = values.iter();
    for t in out.tensors_mut() {
        for v in t.iter_mut() {
            *v = *it.next().expect("parameter count");
        }
    }
    out
}

fn probe_indices(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, count.min(n)).into_vec()
}

fn pick(v: &[f64], indices: &[usize]) -> Vec<f64> {
    indices.iter().map(|&i| v[i]).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_build_covariance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let q = unit_quaternion(rng);
    let s: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0f64).exp()).collect();
    let weights = Matrix3::from_fn(|_, _| normal(rng));
    let x: Vec<f64> = q.iter().copied().chain(s.iter().copied()).collect();
    let f = |p: &[f64]| {
        let sigma = covariance_from_parts(&[p[0], p[1], p[2], p[3]], &Vector3::new(p[4], p[5], p[6]));
        sigma.component_mul(&weights).sum()
    };
    let (dq, ds) = build_covariance_backward(&q, &Vector3::new(s[0], s[1], s[2]), &weights);
    let analytic: Vec<f64> = dq.iter().copied().chain(ds.iter().copied()).collect();
    Ok(relative_error(&analytic, &central_difference(f, &x, &all(7), FD_STEP)))
}

fn check_gaussian_weight(rng: &mut ChaCha8Rng) -> Result<f64> {
    let sigma = random_covariance(rng, -0.5, 0.5);
    let mean = Vector3::from_fn(|_, _| normal(rng));
    let x = mean + Vector3::from_fn(|_, _| 0.7 * normal(rng));
    let dw = normal(rng);
    let mut params: Vec<f64> = x.iter().chain(mean.iter()).copied().collect();
    params.extend(sigma.iter().copied());
    let f = |p: &[f64]| {
        let x = Vector3::new(p[0], p[1], p[2]);
        let m = Vector3::new(p[3], p[4], p[5]);
        let s = Matrix3::from_column_slice(&p[6..15]);
        dw * gaussian_weight(&x, &m, &s).unwrap_or(f64::NAN)
    };
    let g = gaussian_weight_backward(&x, &mean, &sigma, dw)?;
    let mut analytic: Vec<f64> = g.d_x.iter().chain(g.d_mean.iter()).copied().collect();
    analytic.extend(g.d_sigma.iter().copied());
    Ok(relative_error(&analytic, &central_difference(f, &params, &all(15), FD_STEP)))
}

fn check_project_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cam = random_camera(rng, 32, 24)?;
    let x = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let dp = Vector2::new(normal(rng), normal(rng));
    let f = |p: &[f64]| dp.dot(&project_point(&Vector3::new(p[0], p[1], p[2]), &cam).pixel);
    let analytic = project_point_backward(&x, &cam, &dp);
    Ok(relative_error(
        analytic.as_slice(),
        &central_difference(f, x.as_slice(), &all(3), FD_STEP),
    ))
}

fn check_project_covariance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cam = random_camera(rng, 32, 24)?;
    let x = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let sigma = random_covariance(rng, -3.0, -1.0);
    let g = Sym2::new(normal(rng), normal(rng), normal(rng));
    let mut params: Vec<f64> = sigma.iter().copied().collect();
    params.extend(x.iter().copied());
    let f = |p: &[f64]| {
        let s = Matrix3::from_column_slice(&p[..9]);
        match project_covariance(&s, &Vector3::new(p[9], p[10], p[11]), &cam) {
            Ok(c) => g.xx * c.xx + g.xy * c.xy + g.yy * c.yy,
            Err(_) => f64::NAN,
        }
    };
    let (d_sigma, d_x) = project_covariance_backward(&sigma, &x, &cam, &g);
    let mut analytic: Vec<f64> = d_sigma.iter().copied().collect();
    analytic.extend(d_x.iter().copied());
    Ok(relative_error(&analytic, &central_difference(f, &params, &all(12), FD_STEP)))
}

/// Per Gaussian: mean (2), covariance (3), opacity, color (3).
const RENDER_STRIDE: usize = 9;

fn render_input(p: &[f64], depths: &[f64], width: usize, height: usize, bg: [f64; 3]) -> RenderInput {
    let n = depths.len();
    let mut projected = Vec::with_capacity(n);
    let mut opacity = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for (i, &depth) in depths.iter().enumerate() {
        let g = &p[i * RENDER_STRIDE..(i + 1) * RENDER_STRIDE];
        projected.push(ProjectedGaussian {
            pixel_mean: Vector2::new(g[0], g[1]),
            depth,
            cov2d: Sym2::new(g[2], g[3], g[4]),
            valid: true,
        });
        opacity.push(g[5]);
        colors.push([g[6], g[7], g[8]]);
    }
    let mut input = RenderInput::new(projected, opacity, colors, width, height, bg);
    input.tile_size = 8;
    input.culling = false;
    input
}

fn check_render(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (width, height) = (16, 12);
    let n = 3;
    let depths: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 + rng.random::<f64>() * 0.5).collect();
    let mut params = Vec::with_capacity(n * RENDER_STRIDE);
    for _ in 0..n {
        let a = rng.random_range(1.0..9.0);
        let b = rng.random_range(1.0..9.0);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (s, c) = theta.sin_cos();
        params.extend([
            rng.random_range(2.0..(width as f64 - 3.0)),
            rng.random_range(2.0..(height as f64 - 3.0)),
            a * c * c + b * s * s,
            (a - b) * s * c,
            a * s * s + b * c * c,
            rng.random_range(0.2..0.9),
            rng.random(),
            rng.random(),
            rng.random(),
        ]);
    }
    let bg = [rng.random(), rng.random(), rng.random()];
    let weights = random_image(rng, width, height);
    let weights = Image::from_vec(width, height, weights.data.iter().map(|v| v - 0.5).collect())?;
    let f = |p: &[f64]| match render(&render_input(p, &depths, width, height, bg)) {
        Ok(out) => dot(&out.image.data, &weights.data),
        Err(_) => f64::NAN,
    };
    let input = render_input(&params, &depths, width, height, bg);
    let out = render(&input)?;
    let g = render_backward(&input, &out, &weights)?;
    let mut analytic = Vec::with_capacity(params.len());
    for i in 0..n {
        let c = g.d_cov[i];
        analytic.extend([g.d_mean[i].x, g.d_mean[i].y, c.xx, c.xy, c.yy, g.d_opacity[i]]);
        analytic.extend(g.d_color[i]);
    }
    Ok(relative_error(
        &analytic,
        &central_difference(f, &params, &all(params.len()), FD_STEP),
    ))
}

fn stack_weights(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> FeatureStack {
    FeatureStack {
        maps: (0..k)
            .map(|_| Array3::from_shape_fn((FEATURE_CHANNELS, h, w), |_| normal(rng)))
            .collect(),
        projection: Array3::from_shape_fn((FEATURE_CHANNELS, h, w), |_| normal(rng)),
        visibility: Array2::from_shape_fn((h, w), |_| normal(rng)),
    }
}

fn stack_dot(a: &FeatureStack, b: &FeatureStack) -> f64 {
    let maps: f64 = a.maps.iter().zip(&b.maps).map(|(x, y)| (x * y).sum()).sum();
    maps + (&a.projection * &b.projection).sum() + (&a.visibility * &b.visibility).sum()
}

fn check_extract_features(rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let k = 1 + rng.random_range(0..2);
    let net = ExtractorNet::new(k, rng);
    let width = DOWNSAMPLE_FACTOR + rng.random_range(1..DOWNSAMPLE_FACTOR);
    let height = DOWNSAMPLE_FACTOR + rng.random_range(1..DOWNSAMPLE_FACTOR);
    let image = random_image(rng, width, height);
    let weights = stack_weights(rng, k, height, width);
    let params = flat_params(&net);
    let probes = probe_indices(rng, params.len(), PARAMETER_PROBES);
    let f = |p: &[f64]| {
        let (stack, tape) = with_params(&net, p).forward(&image);
        (stack_dot(&stack, &weights), tape.relu_pattern())
    };
    let Some(numeric) = guarded_central_difference(f, &params, &probes, FD_STEP) else {
        return Ok(None);
    };
    let (_, tape) = net.forward(&image);
    let grad = flat_params(&net.backward(&tape, &weights));
    Ok(Some(relative_error(&pick(&grad, &probes), &numeric)))
}

fn check_bilinear_sample(rng: &mut ChaCha8Rng) -> Result<f64> {
    let h = rng.random_range(2..9);
    let w = rng.random_range(2..9);
    let map = Array3::from_shape_fn((FEATURE_CHANNELS, h, w), |_| normal(rng));
    let uv = random_off_grid_uv(rng, h, w);
    let weights = normals(rng, FEATURE_CHANNELS);
    let mut params = vec![uv.x, uv.y];
    params.extend(map.iter().copied());
    let f = |p: &[f64]| {
        let m = Array3::from_shape_vec((FEATURE_CHANNELS, h, w), p[2..].to_vec()).expect("shape");
        dot(&bilinear_sample(&m, &Vector2::new(p[0], p[1])), &weights)
    };
    let mut d_map = Array3::zeros(map.dim());
    let d_uv = bilinear_sample_backward(&map, &uv, &weights, &mut d_map);
    let mut analytic = vec![d_uv.x, d_uv.y];
    analytic.extend(d_map.iter().copied());
    Ok(relative_error(
        &analytic,
        &central_difference(f, &params, &all(params.len()), FD_STEP),
    ))
}

fn check_assemble_dynamic_feature(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (w, h) = (8, 6);
    let k = 2;
    let cam = random_camera(rng, w, h)?;
    let position = loop {
        let x = Vector3::from_fn(|_, _| rng.random_range(-0.6..0.6));
        if let Some(uv) = normalized_projection(&x, &cam) {
            if off_grid(uv.x, w, 0.02) && off_grid(uv.y, h, 0.02) && uv.amax() < 0.9 {
                break x;
            }
        }
    };
    let sampling: Vec<[f64; 2]> = (0..k)
        .map(|_| {
            let uv = random_off_grid_uv(rng, h, w);
            [uv.x, uv.y]
        })
        .collect();
    let point = GaussianPoint {
        position,
        rotation: [1.0, 0.0, 0.0, 0.0],
        log_scale: Vector3::zeros(),
        opacity_logit: 0.0,
        intrinsic: vec![0.0; SF_DIM],
        sampling,
    };
    let stack = stack_weights(rng, k, h, w);
    let weight = rng.random_range(0.2..1.5);
    let d_df = normals(rng, FEATURE_CHANNELS * (k + 1));

    let map_len = FEATURE_CHANNELS * h * w;
    let mut params: Vec<f64> = position.iter().copied().collect();
    params.extend(point.sampling.iter().flat_map(|c| c.iter().copied()));
    params.extend(stack.projection.iter().copied());
    for m in &stack.maps {
        params.extend(m.iter().copied());
    }
    let rebuild = |p: &[f64]| {
        let mut pt = point.clone();
        pt.position = Vector3::new(p[0], p[1], p[2]);
        for (j, c) in pt.sampling.iter_mut().enumerate() {
            *c = [p[3 + 2 * j], p[4 + 2 * j]];
        }
        let base = 3 + 2 * k;
        let shape = (FEATURE_CHANNELS, h, w);
        let mut st = stack.clone();
        st.projection = Array3::from_shape_vec(shape, p[base..base + map_len].to_vec()).expect("shape");
        for (j, m) in st.maps.iter_mut().enumerate() {
            let start = base + (j + 1) * map_len;
            *m = Array3::from_shape_vec(shape, p[start..start + map_len].to_vec()).expect("shape");
        }
        (pt, st)
    };
    let f = |p: &[f64]| {
        let (pt, st) = rebuild(p);
        match assemble_dynamic_feature(&pt, &st, Some(&cam), weight) {
            Ok(df) => dot(&df, &d_df),
            Err(_) => f64::NAN,
        }
    };

    let cloud = GaussianCloud::new(vec![point.clone()], k)?;
    let batch = DynamicBatch::assemble(&cloud, &stack, Some(&cam), weight, AppearanceOptions::default(), None)?;
    let d_values = Array2::from_shape_vec((1, d_df.len()), d_df.clone()).expect("shape");
    let mut d_stack = FeatureStack::zeros(k, h, w);
    let mut d_positions = vec![Vector3::zeros()];
    let mut d_sampling = vec![vec![[0.0; 2]; k]];
    batch.backward(
        &cloud,
        &stack,
        Some(&cam),
        d_values.view(),
        &mut d_stack,
        &mut d_positions,
        &mut d_sampling,
    );
    let mut analytic: Vec<f64> = d_positions[0].iter().copied().collect();
    analytic.extend(d_sampling[0].iter().flat_map(|c| c.iter().copied()));
    analytic.extend(d_stack.projection.iter().copied());
    for m in &d_stack.maps {
        analytic.extend(m.iter().copied());
    }
    Ok(relative_error(
        &analytic,
        &central_difference(f, &params, &all(params.len()), FD_STEP),
    ))
}

/// Full Jacobian of the positional encoding, one backward call per output.
///
/// A random projection of the encoding can cancel its low-frequency terms
/// and leave the top frequency's truncation error dominant, so each output
/// coordinate is compared on its own.
fn check_positional_encoding(x: &Vector3<f64>) -> f64 {
    let dim = positional_encoding(x).len();
    let mut analytic = Vec::with_capacity(3 * dim);
    let mut numeric = Vec::with_capacity(3 * dim);
    for j in 0..dim {
        let mut e = vec![0.0; dim];
        e[j] = 1.0;
        analytic.extend(positional_encoding_backward(x, &e).iter().copied());
        let f = |p: &[f64]| positional_encoding(&Vector3::new(p[0], p[1], p[2]))[j];
        numeric.extend(central_difference(f, x.as_slice(), &all(3), FD_STEP));
    }
    relative_error(&analytic, &numeric)
}

/// The network part is differenced through the encoded position, since a
/// step in `X` moves the top encoding frequency far enough to matter; the
/// encoding itself is checked separately.
fn check_fuse(rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let k = 1;
    let nets = FusionNets::new(k, DecoderInput::ViewDirection, rng);
    let df_dim = nets.df_dim();
    let sf: Vec<f64> = normals(rng, SF_DIM).into_iter().map(|v| 0.3 * v).collect();
    let df: Vec<f64> = normals(rng, df_dim).into_iter().map(|v| 0.5 * v).collect();
    let x = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let d_af = normals(rng, AF_DIM);

    let sf_row = Array2::from_shape_vec((1, SF_DIM), sf.clone()).expect("shape");
    let df_row = Array2::from_shape_vec((1, df_dim), df.clone()).expect("shape");
    let inputs = nets.fuse_inputs(&sf_row, &df_row, std::slice::from_ref(&x))?;
    let inputs_len = inputs.len();
    let net_params = flat_params(&nets);
    let mut params: Vec<f64> = inputs.iter().copied().collect();
    params.extend(net_params.iter().copied());
    let mut indices = all(inputs_len);
    indices.extend(
        probe_indices(rng, net_params.len(), PARAMETER_PROBES)
            .into_iter()
            .map(|i| i + inputs_len),
    );
    let f = |p: &[f64]| {
        let n = with_params(&nets, &p[inputs_len..]);
        let row = Array2::from_shape_vec((1, inputs_len), p[..inputs_len].to_vec()).expect("shape");
        let tape = n.fuse_batch_tape(row);
        (dot(tape.af().as_slice().expect("row-major"), &d_af), tape.relu_pattern(&n))
    };
    let Some(numeric) = guarded_central_difference(f, &params, &indices, FD_STEP) else {
        return Ok(None);
    };
    let direct = fuse(&sf, &df, &x, &nets)?;
    if direct != nets.fuse_batch(inputs.clone()).row(0).to_vec() {
        return Err(Error::contract("fuse disagrees with the batched fusion path"));
    }

    let tape = nets.fuse_batch_tape(inputs);
    let mut grad = nets.zeros_like();
    let d_af_row = Array2::from_shape_vec((1, AF_DIM), d_af.clone()).expect("shape");
    let d_inputs = nets.fuse_backward(&tape, d_af_row, &mut grad);
    let mut full: Vec<f64> = d_inputs.iter().copied().collect();
    full.extend(flat_params(&grad));
    let network = relative_error(&pick(&full, &indices), &numeric);
    Ok(Some(network.max(check_positional_encoding(&x))))
}

/// With positional-encoding input the network part is differenced through
/// the encoding, as in [`check_fuse`].
fn check_decode_color(rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let input = if rng.random::<bool>() {
        DecoderInput::ViewDirection
    } else {
        DecoderInput::Position
    };
    let nets = FusionNets::new(1, input, rng);
    let af = normals(rng, AF_DIM);
    let x = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let center = Vector3::from_fn(|_, _| normal(rng)).normalize() * 3.0;
    let d_rgb = normals(rng, 3);

    let af_row = Array2::from_shape_vec((1, AF_DIM), af.clone()).expect("shape");
    let inputs = nets.decoder_inputs(&af_row, std::slice::from_ref(&x), &center);
    let inputs_len = inputs.len();
    let tape = nets.decode_batch_tape(inputs.clone());
    let mut grad = nets.zeros_like();
    let d_out = Array2::from_shape_vec((1, 3), d_rgb.clone()).expect("shape");
    let d_inputs: Vec<f64> = nets.decode_backward(&tape, d_out, &mut grad).iter().copied().collect();
    let d_x = nets.decoder_aux_backward(&x, &center, &d_inputs[AF_DIM..]);

    let net_params = flat_params(&nets);
    let via_encoding = input == DecoderInput::Position;
    // Parameters: af, then X or the encoded position, then network weights.
    let mut params = af.clone();
    let mut analytic = d_inputs[..AF_DIM].to_vec();
    if via_encoding {
        params.extend(inputs.iter().skip(AF_DIM).copied());
        analytic.extend_from_slice(&d_inputs[AF_DIM..]);
    } else {
        params.extend(x.iter().copied());
        analytic.extend(d_x.iter().copied());
    }
    let offset = params.len();
    params.extend(net_params.iter().copied());
    analytic.extend(flat_params(&grad));
    let mut indices = all(offset);
    indices.extend(
        probe_indices(rng, net_params.len(), PARAMETER_PROBES)
            .into_iter()
            .map(|i| i + offset),
    );
    let f = |p: &[f64]| {
        let n = with_params(&nets, &p[offset..]);
        let row = if via_encoding {
            Array2::from_shape_vec((1, inputs_len), p[..inputs_len].to_vec()).expect("shape")
        } else {
            let x = Vector3::new(p[AF_DIM], p[AF_DIM + 1], p[AF_DIM + 2]);
            let af = Array2::from_shape_vec((1, AF_DIM), p[..AF_DIM].to_vec()).expect("shape");
            n.decoder_inputs(&af, std::slice::from_ref(&x), &center)
        };
        let tape = n.decode_batch_tape(row);
        (
            dot(tape.output().as_slice().expect("row-major"), &d_rgb),
            tape.relu_pattern(&n.decoder),
        )
    };
    let Some(numeric) = guarded_central_difference(f, &params, &indices, FD_STEP) else {
        return Ok(None);
    };
    let direct = decode_color(&af, &x, &center, &nets)?;
    if direct.as_slice() != tape.output().as_slice().expect("row-major") {
        return Err(Error::contract("decode_color disagrees with the batched decoder path"));
    }
    let mut err = relative_error(&pick(&analytic, &indices), &numeric);
    if via_encoding {
        err = err.max(check_positional_encoding(&x));
    }
    Ok(Some(err))
}

fn check_ssim(rng: &mut ChaCha8Rng) -> Result<f64> {
    let width = rng.random_range(6..14);
    let height = rng.random_range(6..14);
    let a = random_image(rng, width, height);
    let b = random_image(rng, width, height);
    let n = a.data.len();
    let params: Vec<f64> = a.data.iter().chain(&b.data).copied().collect();
    let f = |p: &[f64]| {
        let a = Image::from_vec(width, height, p[..n].to_vec()).expect("shape");
        let b = Image::from_vec(width, height, p[n..].to_vec()).expect("shape");
        ssim(&a, &b).unwrap_or(f64::NAN)
    };
    let (da, db) = ssim_backward(&a, &b, 1.0)?;
    let analytic: Vec<f64> = da.data.iter().chain(&db.data).copied().collect();
    Ok(relative_error(
        &analytic,
        &central_difference(f, &params, &all(2 * n), FD_STEP),
    ))
}

fn check_l_sc(rng: &mut ChaCha8Rng) -> f64 {
    let k = rng.random_range(1..4);
    let n = rng.random_range(1..6);
    let coord = |rng: &mut ChaCha8Rng| loop {
        let v: f64 = rng.random_range(-2.0..2.0);
        if (v.abs() - 1.0).abs() > 1e-2 {
            return v;
        }
    };
    let points: Vec<GaussianPoint> = (0..n)
        .map(|_| GaussianPoint {
            position: Vector3::zeros(),
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::zeros(),
            opacity_logit: 0.0,
            intrinsic: vec![0.0; SF_DIM],
            sampling: (0..k).map(|_| [coord(rng), coord(rng)]).collect(),
        })
        .collect();
    let cloud = GaussianCloud { points, k };
    let params: Vec<f64> = cloud
        .points
        .iter()
        .flat_map(|p| p.sampling.iter().flat_map(|c| c.iter().copied()))
        .collect();
    let f = |p: &[f64]| {
        let mut c = cloud.clone();
        for (i, v) in c
            .points
            .iter_mut()
            .flat_map(|pt| pt.sampling.iter_mut().flat_map(|c| c.iter_mut()))
            .enumerate()
        {
            *v = p[i];
        }
        l_sc(&c)
    };
    let analytic: Vec<f64> = l_sc_backward(&cloud, 1.0)
        .iter()
        .flat_map(|p| p.iter().flat_map(|c| c.iter().copied()))
        .collect();
    relative_error(
        &analytic,
        &central_difference(f, &params, &all(params.len()), FD_STEP),
    )
}

fn check_l_vm(rng: &mut ChaCha8Rng) -> f64 {
    let (h, w) = (rng.random_range(1..8), rng.random_range(1..8));
    let vm = Array2::from_shape_fn((h, w), |_| rng.random::<f64>());
    let params: Vec<f64> = vm.iter().copied().collect();
    let f = |p: &[f64]| l_vm(&Array2::from_shape_vec((h, w), p.to_vec()).expect("shape"));
    let analytic: Vec<f64> = l_vm_backward(&vm, 1.0).iter().copied().collect();
    relative_error(
        &analytic,
        &central_difference(f, &params, &all(params.len()), FD_STEP),
    )
}

fn check_image_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let width = rng.random_range(6..14);
    let height = rng.random_range(6..14);
    let rendered = random_image(rng, width, height);
    // Keep |rendered − target| away from the L1 kink.
    let target: Vec<f64> = rendered
        .data
        .iter()
        .map(|v| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            v + sign * rng.random_range(0.01..0.3)
        })
        .collect();
    let target = Image::from_vec(width, height, target)?;
    let vm = Array2::from_shape_fn((height, width), |_| rng.random_range(0.05..0.95));
    let weights = LossWeights::default();
    let n = rendered.data.len();
    let mut params = rendered.data.clone();
    params.extend(vm.iter().copied());
    let f = |p: &[f64]| {
        let r = Image::from_vec(width, height, p[..n].to_vec()).expect("shape");
        let m = Array2::from_shape_vec((height, width), p[n..].to_vec()).expect("shape");
        image_loss(&r, &target, &m, &weights).map(|l| l.total).unwrap_or(f64::NAN)
    };
    let (d_r, d_vm) = image_loss_backward(&rendered, &target, &vm, &weights, 1.0)?;
    let mut analytic = d_r.data.clone();
    analytic.extend(d_vm.iter().copied());
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("non-finite analytic gradient"));
    }
    Ok(relative_error(
        &analytic,
        &central_difference(f, &params, &all(params.len()), FD_STEP),
    ))
}
