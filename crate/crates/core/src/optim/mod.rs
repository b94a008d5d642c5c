//! Adam, learning-rate schedules, sampling-coordinate initialization and the
//! training loop.

mod train;

pub use train::{
    evaluate, train, Ablation, StepReport, TrainConfig, TrainLogLine, TrainOutput, TrainState,
};

use nalgebra::{Matrix2x3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Moments for one parameter group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Moments for a resized group: row `i` of the result copies row
    /// `origin[i]` of `self` (`width` values per row), or zeros.
    pub fn remap(&self, origin: &[Option<usize>], width: usize) -> Self {
        let mut out = Self::new(origin.len() * width);
        out.step = self.step;
        for (i, src) in origin.iter().enumerate() {
            if let Some(j) = src {
                out.m[i * width..(i + 1) * width].copy_from_slice(&self.m[j * width..(j + 1) * width]);
                out.v[i * width..(i + 1) * width].copy_from_slice(&self.v[j * width..(j + 1) * width]);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; the group was left untouched.
    SkippedNonFinite,
}

/// Bias-corrected Adam update of one parameter group.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> StepOutcome {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    assert_eq!(params.len(), state.len(), "parameter and moment lengths differ");
    if grads.iter().any(|g| !g.is_finite()) {
        return StepOutcome::SkippedNonFinite;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
    }
    StepOutcome::Applied
}

/// `lr(t) = lr₀ (lr_T / lr₀)^(t / T)`, held at `lr_T` past `T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExponentialLr {
    pub initial: f64,
    pub last: f64,
    pub steps: usize,
}

impl ExponentialLr {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            last: lr,
            steps: 1,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if self.steps == 0 {
            return self.last;
        }
        let t = (step as f64 / self.steps as f64).min(1.0);
        self.initial * (self.last / self.initial).powf(t)
    }
}

/// Learning rates for every parameter group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedules {
    /// Multiplied by the scene extent.
    pub position: ExponentialLr,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub intrinsic: f64,
    pub sampling: f64,
    pub extractor: ExponentialLr,
    pub mlp: f64,
}

impl Schedules {
    pub fn new(total_steps: usize) -> Self {
        Self {
            position: ExponentialLr {
                initial: 1.6e-4,
                last: 1.6e-7,
                steps: total_steps,
            },
            rotation: 1e-3,
            log_scale: 5e-3,
            opacity: 0.05,
            intrinsic: 2.5e-3,
            sampling: 3e-3,
            extractor: ExponentialLr {
                initial: 2e-3,
                last: 2e-5,
                steps: total_steps,
            },
            mlp: 5e-4,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let all = [
            self.position.initial,
            self.position.last,
            self.rotation,
            self.log_scale,
            self.opacity,
            self.intrinsic,
            self.sampling,
            self.extractor.initial,
            self.extractor.last,
            self.mlp,
        ];
        if all.iter().any(|lr| !(*lr > 0.0) || !lr.is_finite()) {
            return Err(crate::Error::Contract("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// `K` random 2×3 matrices with rows rescaled to sum to 1, applied to every
/// position: `sc^k_i = M^k X_i`.
pub fn sampling_matrices(k: usize, seed: u64) -> Vec<Matrix2x3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            let mut m = Matrix2x3::from_fn(|_, _| rng.random::<f64>());
            for r in 0..2 {
                let sum: f64 = m.row(r).sum();
                let sum = if sum > 0.0 { sum } else { 1.0 };
                for c in 0..3 {
                    m[(r, c)] /= sum;
                }
            }
            m
        })
        .collect()
}

pub fn init_sampling_coords(positions: &[Vector3<f64>], k: usize, seed: u64) -> Vec<Vec<[f64; 2]>> {
    let mats = sampling_matrices(k, seed);
    positions
        .iter()
        .map(|x| {
            mats.iter()
                .map(|m| {
                    let v = m * x;
                    [v.x, v.y]
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut s = AdamState::new(3);
        assert_eq!(adam_step(&mut p, &[0.0; 3], &mut s, 0.1), StepOutcome::Applied);
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02, 1e3] {
            let mut p = vec![0.5];
            let mut s = AdamState::new(1);
            adam_step(&mut p, &[g], &mut s, 0.01);
            let delta = p[0] - 0.5;
            assert!((delta.abs() - 0.01).abs() < 1e-8);
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn ten_steps_match_scalar_reference() {
        // Minimize (x - 3)² from x = 0.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1);
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            trace.push(x);
        }
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        for expected in trace {
            let g = 2.0 * (p[0] - 3.0);
            adam_step(&mut p, &[g], &mut s, lr);
            assert!((p[0] - expected).abs() < 1e-14, "{} vs {expected}", p[0]);
        }
    }

    #[test]
    fn non_finite_gradient_skips_group() {
        let mut p = vec![1.0, 2.0];
        let mut s = AdamState::new(2);
        let out = adam_step(&mut p, &[0.5, f64::NAN], &mut s, 0.1);
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(s, AdamState::new(2));
    }

    #[test]
    fn schedule_endpoints_and_monotone() {
        let s = ExponentialLr {
            initial: 2e-3,
            last: 2e-5,
            steps: 100,
        };
        assert!((s.at(0) - 2e-3).abs() < 1e-18);
        assert!((s.at(100) - 2e-5).abs() < 1e-18);
        assert!((s.at(50) - 2e-4).abs() < 1e-15);
        assert!(s.at(1000) > 0.0);
        assert!((1..100).all(|t| s.at(t) < s.at(t - 1)));
    }

    #[test]
    fn sampling_init_row_sums() {
        let a = 0.37;
        let sc = init_sampling_coords(&[Vector3::repeat(a)], 3, 5);
        for c in &sc[0] {
            assert!((c[0] - a).abs() < 1e-12 && (c[1] - a).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_init_is_linear_and_seeded() {
        let x1 = Vector3::new(0.2, -0.4, 0.9);
        let d = Vector3::new(0.05, 0.1, -0.2);
        let sc = init_sampling_coords(&[x1, x1 + d], 2, 8);
        let mats = sampling_matrices(2, 8);
        for k in 0..2 {
            let md = mats[k] * d;
            assert!((sc[1][k][0] - sc[0][k][0] - md.x).abs() < 1e-12);
            assert!((sc[1][k][1] - sc[0][k][1] - md.y).abs() < 1e-12);
        }
        assert_eq!(sc, init_sampling_coords(&[x1, x1 + d], 2, 8));
        assert_ne!(sc, init_sampling_coords(&[x1, x1 + d], 2, 9));
    }

    #[test]
    fn remap_copies_surviving_rows() {
        let mut s = AdamState::new(6);
        s.m = vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        s.v = s.m.clone();
        s.step = 7;
        let r = s.remap(&[Some(2), None, Some(0)], 2);
        assert_eq!(r.m, vec![3.0, 3.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(r.step, 7);
    }
}
