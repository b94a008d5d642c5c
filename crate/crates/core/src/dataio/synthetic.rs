//! Procedural scene of textured spheres and boxes on a ground slab, seen by a
//! ring of cameras, with per-image color perturbations and occluders.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dataset, Occluder, Perturbation, View};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::optim::init_sampling_coords;
use crate::pipeline::render_with_colors;
use crate::scene::{logit, GaussianCloud, GaussianPoint, SF_DIM};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Ground-truth point count (approximate after rounding per surface).
    pub n_points: usize,
    /// Sampling maps of the initial cloud.
    pub k: usize,
    pub gain_range: (f64, f64),
    pub bias_range: (f64, f64),
    pub max_occluders: usize,
    pub background: [f64; 3],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            n_train: 20,
            n_test: 5,
            n_points: 2000,
            k: 3,
            gain_range: (0.6, 1.4),
            bias_range: (-0.1, 0.1),
            max_occluders: 2,
            background: [0.0; 3],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 2 || self.n_test < 1 {
            return Err(Error::contract(format!(
                "synthetic dataset needs at least 2 train and 1 test views, got {} and {}",
                self.n_train, self.n_test
            )));
        }
        if self.width < 8 || self.height < 8 || self.n_points == 0 || self.k == 0 {
            return Err(Error::contract(
                "synthetic dataset needs images of at least 8x8, K >= 1 and some points",
            ));
        }
        if self.gain_range.0 > self.gain_range.1 || self.bias_range.0 > self.bias_range.1 {
            return Err(Error::contract("perturbation ranges must be ordered (low, high)"));
        }
        Ok(())
    }
}

/// Ground-truth cloud with fixed per-point colors.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub cloud: GaussianCloud,
    pub colors: Vec<[f64; 3]>,
}

enum Shape {
    Sphere { center: Vector3<f64>, radius: f64 },
    Box { center: Vector3<f64>, half: Vector3<f64> },
    /// Top face only.
    Slab { center: Vector3<f64>, half: Vector3<f64> },
}

impl Shape {
    fn area(&self) -> f64 {
        match self {
            Shape::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Shape::Box { half: h, .. } => 8.0 * (h.x * h.y + h.y * h.z + h.x * h.z),
            Shape::Slab { half: h, .. } => 4.0 * h.x * h.y,
        }
    }

    /// Uniform surface sample and its texture coordinate.
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vector3<f64>, f64) {
        match self {
            Shape::Sphere { center, radius } => {
                let n = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                )
                .normalize();
                let lon = n.y.atan2(n.x);
                let lat = n.z.asin();
                let checker = ((lon * 4.0 / PI).floor() + (lat * 4.0 / PI).floor()) as i64;
                (center + n * *radius, checker.rem_euclid(2) as f64)
            }
            Shape::Box { center, half } => {
                let h = half;
                let faces = [h.y * h.z, h.y * h.z, h.x * h.z, h.x * h.z, h.x * h.y, h.x * h.y];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut face = 5;
                for (i, a) in faces.iter().enumerate() {
                    if pick < *a {
                        face = i;
                        break;
                    }
                    pick -= a;
                }
                let mut p = Vector3::new(
                    rng.random_range(-h.x..h.x),
                    rng.random_range(-h.y..h.y),
                    rng.random_range(-h.z..h.z),
                );
                let axis = face / 2;
                p[axis] = if face % 2 == 0 { h[axis] } else { -h[axis] };
                let stripe = ((p.x + p.y + p.z) * 8.0).floor() as i64;
                (center + p, stripe.rem_euclid(2) as f64)
            }
            Shape::Slab { center, half } => {
                let p = Vector3::new(
                    rng.random_range(-half.x..half.x),
                    rng.random_range(-half.y..half.y),
                    half.z,
                );
                let checker = ((p.x * 4.0).floor() + (p.y * 4.0).floor()) as i64;
                (center + p, checker.rem_euclid(2) as f64)
            }
        }
    }
}

fn scene_shapes() -> Vec<(Shape, [f64; 3])> {
    vec![
        (
            Shape::Sphere {
                center: Vector3::new(0.4, 0.3, 0.05),
                radius: 0.35,
            },
            [0.9, 0.35, 0.2],
        ),
        (
            Shape::Sphere {
                center: Vector3::new(-0.5, -0.35, -0.05),
                radius: 0.25,
            },
            [0.25, 0.45, 0.9],
        ),
        (
            Shape::Box {
                center: Vector3::new(-0.35, 0.45, 0.0),
                half: Vector3::new(0.3, 0.25, 0.3),
            },
            [0.3, 0.8, 0.35],
        ),
        (
            Shape::Box {
                center: Vector3::new(0.4, -0.45, -0.15),
                half: Vector3::new(0.25, 0.3, 0.15),
            },
            [0.9, 0.8, 0.3],
        ),
        (
            Shape::Slab {
                center: Vector3::new(0.0, 0.0, -0.32),
                half: Vector3::new(0.95, 0.95, 0.02),
            },
            [0.75, 0.7, 0.65],
        ),
    ]
}

fn ground_truth<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<SyntheticScene> {
    let shapes = scene_shapes();
    let total_area: f64 = shapes.iter().map(|(s, _)| s.area()).sum();
    let spacing = (total_area / spec.n_points as f64).sqrt();
    let log_scale = (0.6 * spacing).ln();
    let mut points = Vec::with_capacity(spec.n_points);
    let mut colors = Vec::with_capacity(spec.n_points);
    for (shape, base) in &shapes {
        let count = (spec.n_points as f64 * shape.area() / total_area).round() as usize;
        for _ in 0..count {
            let (position, texture) = shape.sample(rng);
            let shade = 0.55 + 0.45 * texture;
            colors.push(base.map(|c| c * shade));
            points.push(GaussianPoint {
                position,
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: Vector3::repeat(log_scale),
                opacity_logit: logit(0.95),
                intrinsic: vec![0.0; SF_DIM],
                sampling: vec![[0.0; 2]; spec.k],
            });
        }
    }
    Ok(SyntheticScene {
        cloud: GaussianCloud::new(points, spec.k)?,
        colors,
    })
}

const RING_RADIUS: f64 = 3.0;
const FIELD_OF_VIEW: f64 = 50.0 * PI / 180.0;

fn ring_camera(spec: &SyntheticSpec, angle: f64, height: f64) -> Result<Camera> {
    let eye = Vector3::new(RING_RADIUS * angle.cos(), RING_RADIUS * angle.sin(), height);
    let focal = 0.5 * spec.width.max(spec.height) as f64 / (0.5 * FIELD_OF_VIEW).tan();
    Camera::look_at(eye, Vector3::zeros(), Vector3::z(), focal, spec.width, spec.height)
}

fn random_perturbation<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Perturbation {
    let (g0, g1) = spec.gain_range;
    let (b0, b1) = spec.bias_range;
    let mut draw = |lo: f64, hi: f64| if lo == hi { lo } else { rng.random_range(lo..hi) };
    let gains = [draw(g0, g1), draw(g0, g1), draw(g0, g1)];
    let biases = [draw(b0, b1), draw(b0, b1), draw(b0, b1)];
    Perturbation { gains, biases }
}

fn random_occluders<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Vec<Occluder> {
    let count = rng.random_range(0..=spec.max_occluders);
    (0..count)
        .map(|_| {
            let width = rng.random_range(spec.width / 8..=spec.width * 3 / 8).max(1);
            let height = rng.random_range(spec.height / 8..=spec.height * 3 / 8).max(1);
            Occluder {
                x: rng.random_range(0..=spec.width - width),
                y: rng.random_range(0..=spec.height - height),
                width,
                height,
                color: [rng.random(), rng.random(), rng.random()],
            }
        })
        .collect()
}

/// Initial cloud: ground-truth positions with Gaussian jitter of 2% of the
/// scene extent and randomized remaining attributes.
fn initial_cloud<R: Rng + ?Sized>(truth: &GaussianCloud, k: usize, seed: u64, rng: &mut R) -> Result<GaussianCloud> {
    let sigma = 0.02 * truth.extent();
    let base_scale = truth.points[0].log_scale.x;
    let positions: Vec<Vector3<f64>> = truth
        .points
        .iter()
        .map(|p| {
            p.position
                + Vector3::from_fn(|_, _| sigma * rng.sample::<f64, _>(StandardNormal))
        })
        .collect();
    let sampling = init_sampling_coords(&positions, k, seed);
    let points = positions
        .into_iter()
        .zip(sampling)
        .map(|(position, sampling)| {
            let mut p = GaussianPoint {
                position,
                rotation: std::array::from_fn(|_| rng.sample(StandardNormal)),
                log_scale: Vector3::from_fn(|_, _| base_scale + rng.random_range(-0.3..0.3)),
                opacity_logit: logit(0.1),
                intrinsic: (0..SF_DIM).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect(),
                sampling,
            };
            p.normalize_rotation();
            p
        })
        .collect();
    GaussianCloud::new(points, k)
}

/// Generated dataset plus the ground truth it was rendered from.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub ground_truth: SyntheticScene,
}

/// Train view 0 is the clean appearance reference; test views carry no
/// perturbation and no occluders.
pub fn generate_dataset(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = ground_truth(spec, &mut rng)?;
    let clean = |camera: &Camera| {
        render_with_colors(&truth.cloud, truth.colors.clone(), camera, spec.background).map(|o| o.image)
    };

    let mut train = Vec::with_capacity(spec.n_train);
    for i in 0..spec.n_train {
        let angle = 2.0 * PI * i as f64 / spec.n_train as f64;
        let camera = ring_camera(spec, angle, 1.1 + 0.3 * (3.0 * angle).sin())?;
        let (perturbation, occluders) = if i == 0 {
            (Perturbation::identity(), Vec::new())
        } else {
            (random_perturbation(spec, &mut rng), random_occluders(spec, &mut rng))
        };
        let mut image = perturbation.apply(&clean(&camera)?);
        for o in &occluders {
            o.paint(&mut image);
        }
        train.push(View {
            image,
            camera,
            perturbation,
            occluders,
        });
    }

    let mut test = Vec::with_capacity(spec.n_test);
    for j in 0..spec.n_test {
        let angle = 2.0 * PI * (j as f64 + 0.37) / spec.n_test as f64;
        let camera = ring_camera(spec, angle, 1.2)?;
        test.push(View {
            image: clean(&camera)?,
            camera,
            perturbation: Perturbation::identity(),
            occluders: Vec::new(),
        });
    }

    let init_cloud = initial_cloud(&truth.cloud, spec.k, seed ^ 0x5eed, &mut rng)?;
    Ok(SyntheticDataset {
        dataset: Dataset {
            train,
            test,
            reference: 0,
            init_cloud,
        },
        ground_truth: truth,
    })
}
