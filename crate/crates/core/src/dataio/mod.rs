//! Datasets of posed images, the procedural perturbed-scene generator,
//! on-disk formats and image metrics.

pub mod files;
pub mod synthetic;

pub use files::{
    load_cameras, load_dataset, load_scene, read_image, save_cameras, save_dataset, save_scene,
    write_image,
};
pub use synthetic::{generate_dataset, SyntheticScene, SyntheticSpec};

use crate::camera::Camera;
use crate::error::Result;
use crate::frame::Image;
use crate::losses::ssim;
use crate::scene::GaussianCloud;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Per-image color transform `clamp(gain · v + bias, 0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perturbation {
    pub gains: [f64; 3],
    pub biases: [f64; 3],
}

impl Perturbation {
    pub fn identity() -> Self {
        Self {
            gains: [1.0; 3],
            biases: [0.0; 3],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn apply(&self, image: &Image) -> Image {
        let mut out = image.clone();
        for px in out.data.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = (self.gains[c] * px[c] + self.biases[c]).clamp(0.0, 1.0);
            }
        }
        out
    }
}

/// Solid rectangle painted over a training image, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Occluder {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub color: [f64; 3],
}

impl Occluder {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }

    pub fn paint(&self, image: &mut Image) {
        for y in self.y..(self.y + self.height).min(image.height) {
            for x in self.x..(self.x + self.width).min(image.width) {
                image.set_pixel(x, y, self.color);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: Image,
    pub camera: Camera,
    pub perturbation: Perturbation,
    pub occluders: Vec<Occluder>,
}

impl View {
    /// Row-major flags marking pixels covered by an occluder.
    pub fn occluder_mask(&self) -> Vec<bool> {
        let (w, h) = (self.image.width, self.image.height);
        (0..w * h)
            .map(|i| self.occluders.iter().any(|o| o.contains(i % w, i / w)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<View>,
    pub test: Vec<View>,
    /// Index into `train` of the clean image used as the appearance
    /// reference for evaluation.
    pub reference: usize,
    pub init_cloud: GaussianCloud,
}

impl Dataset {
    pub fn reference_view(&self) -> &View {
        &self.train[self.reference]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len().max(1) as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub fn metrics(rendered: &Image, target: &Image) -> Result<Metrics> {
    Ok(Metrics {
        psnr: psnr(rendered, target)?,
        ssim: ssim(rendered, target)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image::from_vec(w, h, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn psnr_identical_is_capped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_image(&mut rng, 5, 4);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_of_mse_001_is_20db() {
        let a = Image::filled(4, 4, [0.5; 3]);
        let b = Image::filled(4, 4, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_loop_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 7, 3);
        let b = random_image(&mut rng, 7, 3);
        let mut sum = 0.0;
        for y in 0..3 {
            for x in 0..7 {
                let (p, q) = (a.pixel(x, y), b.pixel(x, y));
                for c in 0..3 {
                    sum += (p[c] - q[c]).powi(2);
                }
            }
        }
        let oracle = 10.0 * (1.0 / (sum / 63.0)).log10();
        assert!((psnr(&a, &b).unwrap() - oracle).abs() < 1e-12);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Image::new(2, 2)).is_err());
    }

    #[test]
    fn perturbation_clamps() {
        let img = Image::filled(3, 3, [0.5, 0.7, 0.2]);
        let p = Perturbation {
            gains: [2.0; 3],
            biases: [0.0; 3],
        };
        let out = p.apply(&img);
        assert_eq!(out.pixel(1, 1), [1.0, 1.0, 0.4]);
        assert_eq!(Perturbation::identity().apply(&img), img);
    }

    #[test]
    fn occluder_mask_covers_rectangle() {
        let o = Occluder {
            x: 1,
            y: 2,
            width: 2,
            height: 1,
            color: [1.0, 0.0, 0.0],
        };
        let mut img = Image::new(4, 4);
        o.paint(&mut img);
        let view = View {
            image: img.clone(),
            camera: Camera::look_at(
                nalgebra::Vector3::new(0.0, -3.0, 0.0),
                nalgebra::Vector3::zeros(),
                nalgebra::Vector3::z(),
                4.0,
                4,
                4,
            )
            .unwrap(),
            perturbation: Perturbation::identity(),
            occluders: vec![o],
        };
        let mask = view.occluder_mask();
        assert_eq!(mask.iter().filter(|m| **m).count(), 2);
        assert!(mask[2 * 4 + 1] && mask[2 * 4 + 2]);
        assert_eq!(img.pixel(2, 2), [1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(3, 2), [0.0; 3]);
    }
}
