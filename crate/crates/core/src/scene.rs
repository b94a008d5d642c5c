//! Gaussian point cloud, covariance construction and the densify/prune step.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Length of the per-point intrinsic appearance feature.
pub const SF_DIM: usize = 48;

const QUAT_TOLERANCE: f64 = 1e-6;
const MAX_CONDITION: f64 = 1e12;
/// Scale divisor for the two children of a split.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPoint {
    pub position: Vector3<f64>,
    /// Unit quaternion, scalar first.
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    /// Intrinsic appearance feature, length [`SF_DIM`].
    pub intrinsic: Vec<f64>,
    /// One sampling coordinate per feature map.
    pub sampling: Vec<[f64; 2]>,
}

impl GaussianPoint {
    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        build_covariance(&self.rotation, &self.scale())
    }

    pub fn normalize_rotation(&mut self) {
        let n = quat_norm(&self.rotation);
        if n > 0.0 && n.is_finite() {
            for c in &mut self.rotation {
                *c /= n;
            }
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub points: Vec<GaussianPoint>,
    /// Number of sampling feature maps.
    pub k: usize,
}

impl GaussianCloud {
    pub fn new(points: Vec<GaussianPoint>, k: usize) -> Result<Self> {
        let cloud = Self { points, k };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if p.sampling.len() != self.k {
                return Err(Error::contract(format!(
                    "point {i} has {} sampling coordinates, cloud K = {}",
                    p.sampling.len(),
                    self.k
                )));
            }
            if p.intrinsic.len() != SF_DIM {
                return Err(Error::contract(format!(
                    "point {i} has intrinsic feature of length {}, expected {SF_DIM}",
                    p.intrinsic.len()
                )));
            }
        }
        Ok(())
    }

    /// Radius of the bounding sphere around the centroid.
    pub fn extent(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        let centroid = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.position)
            / self.points.len() as f64;
        self.points
            .iter()
            .map(|p| (p.position - centroid).norm())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn quat_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// Rotation matrix of a (not necessarily normalized) quaternion, using the
/// unit-quaternion formula.
pub fn rotation_from_quaternion(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient of a scalar w.r.t. the quaternion given dL/dR.
pub fn rotation_from_quaternion_backward(q: &[f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(
        0.0,
        2.0 * y,
        2.0 * z,
        2.0 * y,
        -4.0 * x,
        -2.0 * w,
        2.0 * z,
        2.0 * w,
        -4.0 * x,
    );
    let dy = Matrix3::new(
        -4.0 * y,
        2.0 * x,
        2.0 * w,
        2.0 * x,
        0.0,
        2.0 * z,
        -2.0 * w,
        2.0 * z,
        -4.0 * y,
    );
    let dz = Matrix3::new(
        -4.0 * z,
        -2.0 * w,
        2.0 * x,
        2.0 * w,
        -4.0 * z,
        2.0 * y,
        2.0 * x,
        2.0 * y,
        0.0,
    );
    [
        d_r.component_mul(&dw).sum(),
        d_r.component_mul(&dx).sum(),
        d_r.component_mul(&dy).sum(),
        d_r.component_mul(&dz).sum(),
    ]
}

/// `R S Sᵀ Rᵀ` without the unit-quaternion precondition check.
pub fn covariance_from_parts(q: &[f64; 4], s: &Vector3<f64>) -> Matrix3<f64> {
    let m = rotation_from_quaternion(q) * Matrix3::from_diagonal(s);
    let sigma = m * m.transpose();
    // Force exact symmetry; the product is symmetric only up to rounding.
    Matrix3::from_fn(|i, j| if i <= j { sigma[(i, j)] } else { sigma[(j, i)] })
}

/// Σ = R·S·Sᵀ·Rᵀ from a unit quaternion and positive scales.
pub fn build_covariance(q: &[f64; 4], s: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let n = quat_norm(q);
    if (n - 1.0).abs() > QUAT_TOLERANCE {
        return Err(Error::contract(format!(
            "rotation quaternion has norm {n}, expected 1"
        )));
    }
    if s.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::contract("scales must be positive"));
    }
    Ok(covariance_from_parts(q, s))
}

/// Backward of [`build_covariance`]: (dL/dq, dL/ds) from dL/dΣ.
pub fn build_covariance_backward(
    q: &[f64; 4],
    s: &Vector3<f64>,
    d_sigma: &Matrix3<f64>,
) -> ([f64; 4], Vector3<f64>) {
    let r = rotation_from_quaternion(q);
    let m = r * Matrix3::from_diagonal(s);
    let d_m = (d_sigma + d_sigma.transpose()) * m;
    let d_r = Matrix3::from_fn(|i, j| d_m[(i, j)] * s[j]);
    let d_s = Vector3::from_fn(|j, _| (0..3).map(|i| d_m[(i, j)] * r[(i, j)]).sum());
    (rotation_from_quaternion_backward(q, &d_r), d_s)
}

fn check_conditioning(sigma: &Matrix3<f64>) -> Result<()> {
    let sym = (sigma + sigma.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym).eigenvalues;
    let lo = eig.min();
    let hi = eig.max();
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        return Err(Error::DegenerateCovariance { condition });
    }
    Ok(())
}

/// `exp(-½ (x−X)ᵀ Σ⁻¹ (x−X))`.
pub fn gaussian_weight(x: &Vector3<f64>, mean: &Vector3<f64>, sigma: &Matrix3<f64>) -> Result<f64> {
    check_conditioning(sigma)?;
    let d = x - mean;
    let y = sigma
        .lu()
        .solve(&d)
        .ok_or(Error::DegenerateCovariance {
            condition: f64::INFINITY,
        })?;
    Ok((-0.5 * d.dot(&y)).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianWeightGrad {
    pub d_x: Vector3<f64>,
    pub d_mean: Vector3<f64>,
    pub d_sigma: Matrix3<f64>,
}

pub fn gaussian_weight_backward(
    x: &Vector3<f64>,
    mean: &Vector3<f64>,
    sigma: &Matrix3<f64>,
    d_weight: f64,
) -> Result<GaussianWeightGrad> {
    check_conditioning(sigma)?;
    let lu = sigma.lu();
    let d = x - mean;
    let inv = lu.try_inverse().ok_or(Error::DegenerateCovariance {
        condition: f64::INFINITY,
    })?;
    let y = inv * d;
    let yt = inv.transpose() * d;
    let w = (-0.5 * d.dot(&y)).exp();
    let d_q = -0.5 * w * d_weight;
    let d_x = (y + yt) * d_q;
    // dq/dΣ = -Σ⁻ᵀ d dᵀ Σ⁻ᵀ
    let d_sigma = -(yt * yt.transpose()) * d_q;
    Ok(GaussianWeightGrad {
        d_x,
        d_mean: -d_x,
        d_sigma,
    })
}

/// Per-point accumulated screen-space gradient norms between densify events.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_accum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.grad_accum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad_accum.is_empty()
    }

    pub fn record(&mut self, index: usize, grad_norm: f64) {
        self.grad_accum[index] += grad_norm;
        self.count[index] += 1;
    }

    pub fn mean(&self, index: usize) -> f64 {
        match self.count[index] {
            0 => 0.0,
            c => self.grad_accum[index] / c as f64,
        }
    }

    pub fn reset(&mut self, n: usize) {
        self.grad_accum.clear();
        self.grad_accum.resize(n, 0.0);
        self.count.clear();
        self.count.resize(n, 0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensifyParams {
    pub grad_threshold: f64,
    pub min_opacity: f64,
    pub scene_extent: f64,
    /// Points whose largest scale is at most this fraction of the scene
    /// extent are cloned, larger ones are split.
    pub percent_dense: f64,
}

impl Default for DensifyParams {
    fn default() -> Self {
        Self {
            grad_threshold: 4e-4,
            min_opacity: 0.005,
            scene_extent: 1.0,
            percent_dense: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DensifyOutcome {
    pub cloud: GaussianCloud,
    /// For each output point, the index of the input point it is a verbatim
    /// copy of, or `None` for a newly created clone or split child.
    pub origin: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clone small high-gradient points, split large ones, then drop nearly
/// transparent points.
pub fn densify_and_prune<R: Rng + ?Sized>(
    cloud: &GaussianCloud,
    stats: &DensifyStats,
    params: &DensifyParams,
    rng: &mut R,
) -> Result<DensifyOutcome> {
    if stats.len() != cloud.len() {
        return Err(Error::contract(format!(
            "densify stats cover {} points, cloud has {}",
            stats.len(),
            cloud.len()
        )));
    }
    let mut kept: Vec<(Option<usize>, GaussianPoint)> = Vec::with_capacity(cloud.len());
    let mut born: Vec<GaussianPoint> = Vec::new();
    let (mut cloned, mut split) = (0, 0);
    let size_limit = params.percent_dense * params.scene_extent;

    for (i, p) in cloud.points.iter().enumerate() {
        if stats.mean(i) <= params.grad_threshold {
            kept.push((Some(i), p.clone()));
            continue;
        }
        let scale = p.scale();
        if scale.max() <= size_limit {
            cloned += 1;
            kept.push((Some(i), p.clone()));
            born.push(p.clone());
        } else {
            split += 1;
            let r = rotation_from_quaternion(&p.rotation);
            for _ in 0..2 {
                let n = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                let mut child = p.clone();
                child.position = p.position + r * scale.component_mul(&n);
                child.log_scale = p.log_scale.add_scalar(-SPLIT_SCALE_DIVISOR.ln());
                born.push(child);
            }
        }
    }

    let mut points = Vec::with_capacity(kept.len() + born.len());
    let mut origin = Vec::with_capacity(kept.len() + born.len());
    let mut pruned = 0;
    let candidates = kept
        .into_iter()
        .chain(born.into_iter().map(|p| (None, p)));
    for (src, p) in candidates {
        if p.opacity() < params.min_opacity {
            pruned += 1;
            continue;
        }
        origin.push(src);
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::TrainingCollapse(
            "every point was pruned during densification".into(),
        ));
    }
    Ok(DensifyOutcome {
        cloud: GaussianCloud { points, k: cloud.k },
        origin,
        cloned,
        split,
        pruned,
    })
}
