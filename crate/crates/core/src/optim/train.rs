//! End-to-end training: feature extraction, dynamic features, fusion,
//! decoding, rasterization, losses, the full backward chain, Adam updates and
//! densification.

use nalgebra::{Vector2, Vector3};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adam_step, AdamState, Schedules, StepOutcome};
use crate::appearance::fusion::positional_encoding_backward;
use crate::appearance::nn::Parameterized;
use crate::appearance::{
    intrinsic_matrix, positions, split_fuse_input_grad, zero_grads, AppearanceModel,
    AppearanceOptions, DecoderInput, DynamicBatch, FeatureStack, AF_DIM,
};
use crate::camera::{project_covariance_backward, project_point_backward, Camera};
use crate::dataio::{metrics, Dataset, Metrics};
use crate::error::{Error, Result};
use crate::losses::{
    image_loss, image_loss_backward, l_sc, l_sc_backward, l_vm, l_vm_backward, total_loss,
    total_loss_backward, LossWeights,
};
use crate::pipeline::{project_cloud, reference_appearance, render_cached, Reference};
use crate::rasterizer::{render, render_backward, RenderInput};
use crate::scene::{build_covariance_backward, densify_and_prune, DensifyParams, DensifyStats, GaussianPoint};
use crate::scene::GaussianCloud;

/// Model ablations; all `false` is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub disable_k_maps: bool,
    pub disable_projection_map: bool,
    pub freeze_sc: bool,
    pub disable_separation: bool,
    pub disable_vm: bool,
}

impl Ablation {
    pub fn appearance_options(&self) -> AppearanceOptions {
        AppearanceOptions {
            use_k_maps: !self.disable_k_maps,
            use_projection_map: !self.disable_projection_map,
            use_intrinsic: !self.disable_separation,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub schedules: Schedules,
    pub densify_interval: usize,
    pub densify_from: usize,
    pub densify_until: usize,
    pub grad_threshold: f64,
    pub min_opacity: f64,
    pub percent_dense: f64,
    /// Iterations trained with the visibility map held at 1 before it starts
    /// masking the loss.
    pub vm_warmup: usize,
    /// Decode color from the encoded position instead of the view direction.
    pub lego_mode: bool,
    pub ablation: Ablation,
    pub dropout: bool,
    /// Log (and evaluate) every this many iterations, and at the end.
    pub eval_interval: usize,
    pub background: [f64; 3],
}

impl TrainConfig {
    pub fn new(iterations: usize) -> Self {
        Self {
            iterations,
            seed: 0,
            weights: LossWeights::default(),
            schedules: Schedules::new(iterations),
            densify_interval: 100,
            densify_from: 500,
            densify_until: 15_000,
            grad_threshold: 4e-4,
            min_opacity: 0.005,
            percent_dense: 0.01,
            vm_warmup: 50,
            lego_mode: false,
            ablation: Ablation::default(),
            dropout: true,
            eval_interval: 500,
            background: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.schedules.validate()?;
        if self.iterations == 0 || self.densify_interval == 0 || self.eval_interval == 0 {
            return Err(Error::contract(
                "iterations, densify interval and eval interval must be positive",
            ));
        }
        if !(self.grad_threshold >= 0.0 && self.min_opacity >= 0.0 && self.percent_dense > 0.0) {
            return Err(Error::contract("densification thresholds must be nonnegative"));
        }
        Ok(())
    }

    pub fn decoder_input(&self) -> DecoderInput {
        if self.lego_mode {
            DecoderInput::Position
        } else {
            DecoderInput::ViewDirection
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLogLine {
    pub iteration: usize,
    /// Mean total loss since the previous line.
    pub loss: f64,
    /// Mean training-view PSNR since the previous line.
    pub psnr_train: f64,
    /// Mean test PSNR against the clean reference, NaN without test views.
    pub psnr_test: f64,
    pub n_points: usize,
}

impl std::fmt::Display for TrainLogLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:.6} {:.4} {:.4} {}",
            self.iteration, self.loss, self.psnr_train, self.psnr_test, self.n_points
        )
    }
}

/// Loss terms of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub total: f64,
    pub image: f64,
    pub sampling: f64,
    pub visibility: f64,
    pub psnr: f64,
    /// Parameter groups whose update was skipped for non-finite gradients.
    pub skipped: Vec<String>,
}

struct PointMoments {
    position: AdamState,
    rotation: AdamState,
    log_scale: AdamState,
    opacity: AdamState,
    intrinsic: AdamState,
    sampling: AdamState,
}

impl PointMoments {
    fn new(n: usize, k: usize) -> Self {
        Self {
            position: AdamState::new(3 * n),
            rotation: AdamState::new(4 * n),
            log_scale: AdamState::new(3 * n),
            opacity: AdamState::new(n),
            intrinsic: AdamState::new(crate::scene::SF_DIM * n),
            sampling: AdamState::new(2 * k * n),
        }
    }

    fn remap(&self, origin: &[Option<usize>], k: usize) -> Self {
        Self {
            position: self.position.remap(origin, 3),
            rotation: self.rotation.remap(origin, 4),
            log_scale: self.log_scale.remap(origin, 3),
            opacity: self.opacity.remap(origin, 1),
            intrinsic: self.intrinsic.remap(origin, crate::scene::SF_DIM),
            sampling: self.sampling.remap(origin, 2 * k),
        }
    }
}

/// Per-point gradients of one step.
struct PointGrads {
    position: Vec<Vector3<f64>>,
    rotation: Vec<[f64; 4]>,
    log_scale: Vec<Vector3<f64>>,
    opacity: Vec<f64>,
    intrinsic: Array2<f64>,
    sampling: Vec<Vec<[f64; 2]>>,
}

/// Everything that evolves during training.
pub struct TrainState {
    pub cloud: GaussianCloud,
    pub model: AppearanceModel,
    pub stats: DensifyStats,
    pub iteration: usize,
    scene_extent: f64,
    points: PointMoments,
    extractor: Vec<AdamState>,
    fusion: Vec<AdamState>,
    dropout_rng: ChaCha8Rng,
    view_rng: ChaCha8Rng,
    densify_rng: ChaCha8Rng,
    view_order: Vec<usize>,
}

fn moments_for(tensors: Vec<&mut [f64]>) -> Vec<AdamState> {
    tensors.into_iter().map(|t| AdamState::new(t.len())).collect()
}

/// Adam on one flattened per-point attribute.
fn step_attribute(
    points: &mut [GaussianPoint],
    width: usize,
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    get: impl Fn(&GaussianPoint, &mut Vec<f64>),
    set: impl Fn(&mut GaussianPoint, &[f64]),
) -> StepOutcome {
    let mut params = Vec::with_capacity(points.len() * width);
    for p in points.iter() {
        get(p, &mut params);
    }
    let outcome = adam_step(&mut params, grads, state, lr);
    if outcome == StepOutcome::Applied {
        for (p, v) in points.iter_mut().zip(params.chunks_exact(width)) {
            set(p, v);
        }
    }
    outcome
}

fn step_network(
    params: Vec<&mut [f64]>,
    grads: Vec<crate::appearance::nn::TensorRef<'_>>,
    states: &mut [AdamState],
    lr: f64,
    skipped: &mut Vec<String>,
) {
    for ((p, g), st) in params.into_iter().zip(grads).zip(states.iter_mut()) {
        if adam_step(p, g.data, st, lr) == StepOutcome::SkippedNonFinite {
            skipped.push(g.name);
        }
    }
}

impl TrainState {
    pub fn new(dataset: &Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let cloud = dataset.init_cloud.clone();
        cloud.validate()?;
        if cloud.is_empty() {
            return Err(Error::contract("initial cloud is empty"));
        }
        if dataset.train.is_empty() {
            return Err(Error::contract("dataset has no training views"));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = AppearanceModel::new(cloud.k, config.decoder_input(), &mut init_rng);
        let extractor = moments_for(model.extractor.tensors_mut());
        let fusion = moments_for(model.fusion.tensors_mut());
        Ok(Self {
            points: PointMoments::new(cloud.len(), cloud.k),
            stats: DensifyStats::new(cloud.len()),
            scene_extent: cloud.extent().max(1e-6),
            cloud,
            model,
            iteration: 0,
            extractor,
            fusion,
            dropout_rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)),
            view_rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2)),
            densify_rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3)),
            view_order: Vec::new(),
        })
    }

    /// Next training view: a fresh seeded permutation every epoch.
    pub fn next_view(&mut self, n_views: usize) -> usize {
        if self.view_order.is_empty() {
            self.view_order = (0..n_views).collect();
            self.view_order.shuffle(&mut self.view_rng);
        }
        self.view_order.pop().expect("non-empty permutation")
    }

    /// One optimization step on training view `view`, including any
    /// scheduled densification.
    pub fn step(&mut self, dataset: &Dataset, config: &TrainConfig, view: usize) -> Result<StepReport> {
        let view = dataset
            .train
            .get(view)
            .ok_or_else(|| Error::contract(format!("training view {view} out of range")))?;
        let camera = &view.camera;
        let target = &view.image;
        let options = config.ablation.appearance_options();
        let k = self.cloud.k;
        let n = self.cloud.len();
        let model = &self.model;

        // Forward.
        let (stack, extractor_tape) = model.extractor.forward(target);
        let dropout: Option<&mut dyn rand::RngCore> = if config.dropout {
            Some(&mut self.dropout_rng)
        } else {
            None
        };
        let dynamic = DynamicBatch::assemble(&self.cloud, &stack, Some(camera), 1.0, options, dropout)?;
        let pos = positions(&self.cloud);
        let fuse_inputs = model
            .fusion
            .fuse_inputs(&intrinsic_matrix(&self.cloud, options), &dynamic.values, &pos)?;
        let fuse_tape = model.fusion.fuse_batch_tape(fuse_inputs);
        let center = camera.center();
        let decode_tape = model
            .fusion
            .decode_batch_tape(model.fusion.decoder_inputs(fuse_tape.af(), &pos, &center));
        let colors: Vec<[f64; 3]> = decode_tape
            .output()
            .rows()
            .into_iter()
            .map(|r| [r[0], r[1], r[2]])
            .collect();
        let projection = project_cloud(&self.cloud, camera)?;
        let opacity: Vec<f64> = self.cloud.points.iter().map(|p| p.opacity()).collect();
        let input = RenderInput::new(
            projection.projected,
            opacity,
            colors,
            camera.width,
            camera.height,
            config.background,
        );
        let rendered = render(&input)?;

        let use_vm = !config.ablation.disable_vm && self.iteration >= config.vm_warmup;
        let vm = if use_vm {
            stack.visibility.clone()
        } else {
            Array2::ones(stack.visibility.dim())
        };
        let weights = &config.weights;
        let image_term = image_loss(&rendered.image, target, &vm, weights)?;
        let sampling_term = l_sc(&self.cloud);
        let visibility_term = if use_vm { l_vm(&vm) } else { 0.0 };
        let total = total_loss(image_term.total, sampling_term, visibility_term, weights);
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration + 1,
                detail: format!(
                    "image {} sampling {} visibility {} with {n} points",
                    image_term.total, sampling_term, visibility_term
                ),
            });
        }

        // Backward.
        let (d_image_term, d_sampling_term, d_visibility_term) = total_loss_backward(weights);
        let (d_rendered, mut d_vm) =
            image_loss_backward(&rendered.image, target, &vm, weights, d_image_term)?;
        if use_vm {
            d_vm += &l_vm_backward(&vm, d_visibility_term);
        }
        let rg = render_backward(&input, &rendered, &d_rendered)?;

        let mut grads = PointGrads {
            position: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            log_scale: vec![Vector3::zeros(); n],
            opacity: vec![0.0; n],
            intrinsic: Array2::zeros((n, crate::scene::SF_DIM)),
            sampling: l_sc_backward(&self.cloud, d_sampling_term),
        };
        let half_extent = Vector2::new(0.5 * camera.width as f64, 0.5 * camera.height as f64);
        for (i, p) in self.cloud.points.iter().enumerate() {
            let proj = &input.projected[i];
            if !proj.valid {
                continue;
            }
            grads.position[i] += project_point_backward(&p.position, camera, &rg.d_mean[i]);
            let (d_sigma, d_x) =
                project_covariance_backward(&projection.covariances[i], &p.position, camera, &rg.d_cov[i]);
            grads.position[i] += d_x;
            let scale = p.scale();
            let (dq, ds) = build_covariance_backward(&p.rotation, &scale, &d_sigma);
            // Through the renormalization q / |q| at |q| = 1.
            let radial: f64 = (0..4).map(|j| dq[j] * p.rotation[j]).sum();
            grads.rotation[i] = std::array::from_fn(|j| dq[j] - radial * p.rotation[j]);
            grads.log_scale[i] = ds.component_mul(&scale);
            let a = input.opacity[i];
            grads.opacity[i] = rg.d_opacity[i] * a * (1.0 - a);
            if on_screen(proj, camera) {
                let ndc = rg.d_mean[i].component_mul(&half_extent);
                self.stats.record(i, ndc.norm());
            }
        }

        let mut net_grads = zero_grads(model);
        let d_rgb = Array2::from_shape_fn((n, 3), |(i, c)| rg.d_color[i][c]);
        let d_decoder_in = model.fusion.decode_backward(&decode_tape, d_rgb, &mut net_grads.fusion);
        for (i, x) in pos.iter().enumerate() {
            let row = d_decoder_in.row(i);
            let aux = row.as_slice().expect("row-major");
            grads.position[i] += model.fusion.decoder_aux_backward(x, &center, &aux[AF_DIM..]);
        }
        let d_af = d_decoder_in.slice(s![.., ..AF_DIM]).to_owned();
        let d_fuse_in = model.fusion.fuse_backward(&fuse_tape, d_af, &mut net_grads.fusion);
        let (d_sf, d_df, d_pe) = split_fuse_input_grad(&d_fuse_in, k);
        for (i, x) in pos.iter().enumerate() {
            let row = d_pe.row(i).to_vec();
            grads.position[i] += positional_encoding_backward(x, &row);
        }
        if options.use_intrinsic {
            grads.intrinsic.assign(&d_sf);
        }
        let mut d_stack = FeatureStack::zeros(k, stack.height(), stack.width());
        dynamic.backward(
            &self.cloud,
            &stack,
            Some(camera),
            d_df,
            &mut d_stack,
            &mut grads.position,
            &mut grads.sampling,
        );
        if use_vm {
            d_stack.visibility = d_vm;
        }
        net_grads.extractor = model.extractor.backward(&extractor_tape, &d_stack);

        // Updates.
        let skipped = self.apply_updates(config, &grads, &net_grads);
        self.iteration += 1;
        self.maybe_densify(config)?;

        Ok(StepReport {
            total,
            image: image_term.total,
            sampling: sampling_term,
            visibility: visibility_term,
            psnr: crate::dataio::psnr(&rendered.image, target)?,
            skipped,
        })
    }

    fn apply_updates(&mut self, config: &TrainConfig, g: &PointGrads, net: &AppearanceModel) -> Vec<String> {
        let it = self.iteration;
        let sch = &config.schedules;
        let mut skipped = Vec::new();
        let mut report = |name: &str, outcome: StepOutcome| {
            if outcome == StepOutcome::SkippedNonFinite {
                skipped.push(name.to_string());
            }
        };
        let pts = &mut self.cloud.points;
        let m = &mut self.points;

        let flat: Vec<f64> = g.position.iter().flat_map(|v| v.iter().copied()).collect();
        report(
            "position",
            step_attribute(
                pts,
                3,
                &flat,
                &mut m.position,
                sch.position.at(it) * self.scene_extent,
                |p, out| out.extend(p.position.iter()),
                |p, v| p.position = Vector3::new(v[0], v[1], v[2]),
            ),
        );
        let flat: Vec<f64> = g.rotation.iter().flatten().copied().collect();
        report(
            "rotation",
            step_attribute(
                pts,
                4,
                &flat,
                &mut m.rotation,
                sch.rotation,
                |p, out| out.extend(p.rotation),
                |p, v| p.rotation = [v[0], v[1], v[2], v[3]],
            ),
        );
        let flat: Vec<f64> = g.log_scale.iter().flat_map(|v| v.iter().copied()).collect();
        report(
            "log_scale",
            step_attribute(
                pts,
                3,
                &flat,
                &mut m.log_scale,
                sch.log_scale,
                |p, out| out.extend(p.log_scale.iter()),
                |p, v| p.log_scale = Vector3::new(v[0], v[1], v[2]),
            ),
        );
        report(
            "opacity",
            step_attribute(
                pts,
                1,
                &g.opacity,
                &mut m.opacity,
                sch.opacity,
                |p, out| out.push(p.opacity_logit),
                |p, v| p.opacity_logit = v[0],
            ),
        );
        if !config.ablation.disable_separation {
            let flat = g.intrinsic.as_slice().expect("row-major");
            report(
                "intrinsic",
                step_attribute(
                    pts,
                    crate::scene::SF_DIM,
                    flat,
                    &mut m.intrinsic,
                    sch.intrinsic,
                    |p, out| out.extend_from_slice(&p.intrinsic),
                    |p, v| p.intrinsic.copy_from_slice(v),
                ),
            );
        }
        if !config.ablation.freeze_sc {
            let k = self.cloud.k;
            let flat: Vec<f64> = g.sampling.iter().flatten().flatten().copied().collect();
            report(
                "sampling",
                step_attribute(
                    pts,
                    2 * k,
                    &flat,
                    &mut m.sampling,
                    sch.sampling,
                    |p, out| out.extend(p.sampling.iter().flatten()),
                    |p, v| {
                        for (c, pair) in p.sampling.iter_mut().zip(v.chunks_exact(2)) {
                            *c = [pair[0], pair[1]];
                        }
                    },
                ),
            );
        }
        for p in pts.iter_mut() {
            p.normalize_rotation();
        }

        step_network(
            self.model.extractor.tensors_mut(),
            net.extractor.tensors(),
            &mut self.extractor,
            sch.extractor.at(it),
            &mut skipped,
        );
        step_network(
            self.model.fusion.tensors_mut(),
            net.fusion.tensors(),
            &mut self.fusion,
            sch.mlp,
            &mut skipped,
        );
        for name in &skipped {
            log::warn!("iteration {}: non-finite gradient, skipped update of {name}", it + 1);
        }
        skipped
    }

    fn maybe_densify(&mut self, config: &TrainConfig) -> Result<()> {
        let it = self.iteration;
        if it <= config.densify_from || it > config.densify_until || it % config.densify_interval != 0 {
            return Ok(());
        }
        let params = DensifyParams {
            grad_threshold: config.grad_threshold,
            min_opacity: config.min_opacity,
            scene_extent: self.scene_extent,
            percent_dense: config.percent_dense,
        };
        let outcome = densify_and_prune(&self.cloud, &self.stats, &params, &mut self.densify_rng)?;
        self.points = self.points.remap(&outcome.origin, self.cloud.k);
        self.cloud = outcome.cloud;
        self.stats.reset(self.cloud.len());
        Ok(())
    }
}

/// Whether a valid projection's 3σ footprint touches the image.
fn on_screen(proj: &crate::camera::ProjectedGaussian, camera: &Camera) -> bool {
    let r = 3.0 * proj.cov2d.eigenvalues().1.max(0.0).sqrt();
    let (x, y) = (proj.pixel_mean.x, proj.pixel_mean.y);
    x + r >= 0.0 && y + r >= 0.0 && x - r <= camera.width as f64 - 1.0 && y - r <= camera.height as f64 - 1.0
}

/// Renders every test view with the dataset's clean reference image and
/// scores it against the ground truth.
pub fn evaluate(
    cloud: &GaussianCloud,
    model: &AppearanceModel,
    dataset: &Dataset,
    options: AppearanceOptions,
    background: [f64; 3],
) -> Result<Vec<Metrics>> {
    let reference = dataset.reference_view();
    let af = reference_appearance(
        cloud,
        model,
        &Reference {
            image: &reference.image,
            camera: Some(&reference.camera),
            weight: 1.0,
            transfer: false,
        },
        options,
    )?;
    dataset
        .test
        .iter()
        .map(|v| metrics(&render_cached(cloud, model, &af, &v.camera, background)?, &v.image))
        .collect()
}

pub struct TrainOutput {
    pub cloud: GaussianCloud,
    pub model: AppearanceModel,
    pub log: Vec<TrainLogLine>,
}

/// Runs `config.iterations` steps; `on_log` sees each log line as it is
/// produced.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_log: impl FnMut(&TrainLogLine),
) -> Result<TrainOutput> {
    let mut state = TrainState::new(dataset, config)?;
    let options = config.ablation.appearance_options();
    let mut log = Vec::new();
    let (mut loss_sum, mut psnr_sum, mut count) = (0.0, 0.0, 0usize);
    for it in 1..=config.iterations {
        let view = state.next_view(dataset.train.len());
        let report = state.step(dataset, config, view)?;
        loss_sum += report.total;
        psnr_sum += report.psnr;
        count += 1;
        if it % config.eval_interval == 0 || it == config.iterations {
            let psnr_test = if dataset.test.is_empty() {
                f64::NAN
            } else {
                let m = evaluate(&state.cloud, &state.model, dataset, options, config.background)?;
                m.iter().map(|m| m.psnr).sum::<f64>() / m.len() as f64
            };
            let line = TrainLogLine {
                iteration: it,
                loss: loss_sum / count as f64,
                psnr_train: psnr_sum / count as f64,
                psnr_test,
                n_points: state.cloud.len(),
            };
            on_log(&line);
            log.push(line);
            (loss_sum, psnr_sum, count) = (0.0, 0.0, 0);
        }
    }
    Ok(TrainOutput {
        cloud: state.cloud,
        model: state.model,
        log,
    })
}
