//! Run configuration: a TOML file of `key = value` lines.

use std::path::{Path, PathBuf};

use gsw::dataio::SyntheticSpec;
use gsw::losses::LossWeights;
use gsw::optim::{Ablation, ExponentialLr, Schedules, TrainConfig};
use serde::Deserialize;

use crate::CliError;

/// Densification threshold used when `lego_mode` is on and no explicit
/// `grad_threshold` is given.
pub const LEGO_GRAD_THRESHOLD: f64 = 1.5e-4;
pub const DEFAULT_GRAD_THRESHOLD: f64 = 4e-4;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory, read by `train` and `eval`, written by `generate`.
    pub dataset: Option<PathBuf>,
    /// Directory receiving the scene, checkpoint and log of `train`.
    pub output: PathBuf,
    pub seed: u64,
    pub iterations: usize,
    pub eval_interval: usize,

    pub lambda_l1: f64,
    pub lambda_ssim: f64,
    pub lambda_lpips: f64,
    pub lambda_sc: f64,
    pub lambda_vm: f64,

    pub lr_position_init: f64,
    pub lr_position_final: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_intrinsic: f64,
    pub lr_sampling: f64,
    pub lr_extractor_init: f64,
    pub lr_extractor_final: f64,
    pub lr_mlp: f64,

    pub densify_interval: usize,
    pub densify_from: usize,
    pub densify_until: usize,
    /// Unset means 4e-4, or 1.5e-4 in `lego_mode`.
    pub grad_threshold: Option<f64>,
    pub min_opacity: f64,
    pub percent_dense: f64,
    pub vm_warmup: usize,

    pub lego_mode: bool,
    pub dropout: bool,
    pub disable_k_maps: bool,
    pub disable_projection_map: bool,
    pub freeze_sc: bool,
    pub disable_separation: bool,
    pub disable_vm: bool,
    pub background: [f64; 3],

    pub k: usize,
    pub width: usize,
    pub height: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_points: usize,
    pub gain_range: [f64; 2],
    pub bias_range: [f64; 2],
    pub max_occluders: usize,

    /// Weights swept by `tune` when `--weights` is absent.
    pub tune_weights: Vec<f64>,
    /// Default for `render --transfer`.
    pub transfer: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::new(30_000);
        let s = train.schedules;
        let w = train.weights;
        let spec = SyntheticSpec::default();
        Self {
            dataset: None,
            output: PathBuf::from("out"),
            seed: 0,
            iterations: train.iterations,
            eval_interval: train.eval_interval,
            lambda_l1: w.l1,
            lambda_ssim: w.ssim,
            lambda_lpips: w.lpips,
            lambda_sc: w.sampling,
            lambda_vm: w.visibility,
            lr_position_init: s.position.initial,
            lr_position_final: s.position.last,
            lr_rotation: s.rotation,
            lr_scale: s.log_scale,
            lr_opacity: s.opacity,
            lr_intrinsic: s.intrinsic,
            lr_sampling: s.sampling,
            lr_extractor_init: s.extractor.initial,
            lr_extractor_final: s.extractor.last,
            lr_mlp: s.mlp,
            densify_interval: train.densify_interval,
            densify_from: train.densify_from,
            densify_until: train.densify_until,
            grad_threshold: None,
            min_opacity: train.min_opacity,
            percent_dense: train.percent_dense,
            vm_warmup: train.vm_warmup,
            lego_mode: false,
            dropout: train.dropout,
            disable_k_maps: false,
            disable_projection_map: false,
            freeze_sc: false,
            disable_separation: false,
            disable_vm: false,
            background: train.background,
            k: spec.k,
            width: spec.width,
            height: spec.height,
            n_train: spec.n_train,
            n_test: spec.n_test,
            n_points: spec.n_points,
            gain_range: [spec.gain_range.0, spec.gain_range.1],
            bias_range: [spec.bias_range.0, spec.bias_range.1],
            max_occluders: spec.max_occluders,
            tune_weights: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            transfer: false,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let config: Self = toml::from_str(text)
            .map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e.to_string().trim_end())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Checks everything the commands will later rely on, so a bad value
    /// fails before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: gsw::Error| CliError::Usage(e.to_string());
        self.train_config().validate().map_err(usage)?;
        self.synthetic_spec().validate().map_err(usage)?;
        if self.k == 0 {
            return Err(CliError::Usage("`k` must be at least 1".into()));
        }
        if self.tune_weights.iter().any(|w| !w.is_finite()) {
            return Err(CliError::Usage("`tune_weights` must be finite".into()));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(CliError::Usage("`background` channels must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// The dataset directory, or a usage error naming the missing key.
    pub fn dataset_path(&self) -> Result<&Path, CliError> {
        self.dataset
            .as_deref()
            .ok_or_else(|| CliError::Usage("missing required config key `dataset`".into()))
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            disable_k_maps: self.disable_k_maps,
            disable_projection_map: self.disable_projection_map,
            freeze_sc: self.freeze_sc,
            disable_separation: self.disable_separation,
            disable_vm: self.disable_vm,
        }
    }

    pub fn grad_threshold(&self) -> f64 {
        match (self.grad_threshold, self.lego_mode) {
            (Some(t), _) => t,
            (None, true) => LEGO_GRAD_THRESHOLD,
            (None, false) => DEFAULT_GRAD_THRESHOLD,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut c = TrainConfig::new(self.iterations);
        c.seed = self.seed;
        c.eval_interval = self.eval_interval;
        c.weights = LossWeights {
            l1: self.lambda_l1,
            ssim: self.lambda_ssim,
            lpips: self.lambda_lpips,
            sampling: self.lambda_sc,
            visibility: self.lambda_vm,
        };
        c.schedules = Schedules {
            position: ExponentialLr {
                initial: self.lr_position_init,
                last: self.lr_position_final,
                steps: self.iterations,
            },
            rotation: self.lr_rotation,
            log_scale: self.lr_scale,
            opacity: self.lr_opacity,
            intrinsic: self.lr_intrinsic,
            sampling: self.lr_sampling,
            extractor: ExponentialLr {
                initial: self.lr_extractor_init,
                last: self.lr_extractor_final,
                steps: self.iterations,
            },
            mlp: self.lr_mlp,
        };
        c.densify_interval = self.densify_interval;
        c.densify_from = self.densify_from;
        c.densify_until = self.densify_until;
        c.grad_threshold = self.grad_threshold();
        c.min_opacity = self.min_opacity;
        c.percent_dense = self.percent_dense;
        c.vm_warmup = self.vm_warmup;
        c.lego_mode = self.lego_mode;
        c.dropout = self.dropout;
        c.ablation = self.ablation();
        c.background = self.background;
        c
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            width: self.width,
            height: self.height,
            n_train: self.n_train,
            n_test: self.n_test,
            n_points: self.n_points,
            k: self.k,
            gain_range: (self.gain_range[0], self.gain_range[1]),
            bias_range: (self.bias_range[0], self.bias_range[1]),
            max_occluders: self.max_occluders,
            background: self.background,
        }
    }
}
