//! Visibility-weighted photometric loss, SSIM, and the sampling-coordinate and
//! visibility regularizers.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::frame::Image;
use crate::scene::GaussianCloud;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    /// Perceptual term weight. No perceptual network ships with this crate,
    /// so this must stay 0; the slot is kept for configuration parity.
    pub lpips: f64,
    pub sampling: f64,
    pub visibility: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 0.8,
            ssim: 0.2,
            lpips: 0.0,
            sampling: 0.001,
            visibility: 0.15,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.ssim, self.lpips, self.sampling, self.visibility];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::contract("loss weights must be finite and nonnegative"));
        }
        if self.lpips != 0.0 {
            return Err(Error::contract(
                "perceptual (LPIPS) loss is not available; its weight must be 0",
            ));
        }
        Ok(())
    }
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian blur with zero padding and same-size output. The kernel
/// is symmetric, so this operator is its own adjoint.
fn blur(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let sx = xx as isize + t as isize - r;
                if sx >= 0 && (sx as usize) < w {
                    acc += kv * x[y * w + sx as usize];
                }
            }
            tmp[y * w + xx] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let sy = y as isize + t as isize - r;
                if sy >= 0 && (sy as usize) < h {
                    acc += kv * tmp[sy as usize * w + xx];
                }
            }
            out[y * w + xx] = acc;
        }
    }
    out
}

struct ChannelStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

fn channel_stats(a: &[f64], b: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> ChannelStats {
    let mu_a = blur(a, w, h, k);
    let mu_b = blur(b, w, h, k);
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let e_aa = blur(&sq(a, a), w, h, k);
    let e_bb = blur(&sq(b, b), w, h, k);
    let e_ab = blur(&sq(a, b), w, h, k);
    let n = w * h;
    let mut var_a = vec![0.0; n];
    let mut var_b = vec![0.0; n];
    let mut cov = vec![0.0; n];
    for i in 0..n {
        var_a[i] = e_aa[i] - mu_a[i] * mu_a[i];
        var_b[i] = e_bb[i] - mu_b[i] * mu_b[i];
        cov[i] = e_ab[i] - mu_a[i] * mu_b[i];
    }
    ChannelStats {
        mu_a,
        mu_b,
        var_a,
        var_b,
        cov,
    }
}

/// Mean SSIM over pixels and channels (11x11 Gaussian window, σ = 1.5,
/// zero-padded statistics).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let (w, h) = (a.width, a.height);
    let k = gaussian_kernel();
    let mut total = 0.0;
    for c in 0..3 {
        let s = channel_stats(&channel(a, c), &channel(b, c), w, h, &k);
        for i in 0..w * h {
            let num = (2.0 * s.mu_a[i] * s.mu_b[i] + SSIM_C1) * (2.0 * s.cov[i] + SSIM_C2);
            let den = (s.mu_a[i].powi(2) + s.mu_b[i].powi(2) + SSIM_C1)
                * (s.var_a[i] + s.var_b[i] + SSIM_C2);
            total += num / den;
        }
    }
    Ok(total / (3 * w * h) as f64)
}

/// Gradients of `d_out · ssim(a, b)` w.r.t. both images.
pub fn ssim_backward(a: &Image, b: &Image, d_out: f64) -> Result<(Image, Image)> {
    a.check_same_shape(b)?;
    let (w, h) = (a.width, a.height);
    let n = w * h;
    let k = gaussian_kernel();
    let g = d_out / (3 * n) as f64;
    let mut da = Image::new(w, h);
    let mut db = Image::new(w, h);
    for c in 0..3 {
        let ca = channel(a, c);
        let cb = channel(b, c);
        let s = channel_stats(&ca, &cb, w, h, &k);
        let mut d_mu_a = vec![0.0; n];
        let mut d_mu_b = vec![0.0; n];
        let mut d_e_aa = vec![0.0; n];
        let mut d_e_bb = vec![0.0; n];
        let mut d_e_ab = vec![0.0; n];
        for i in 0..n {
            let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
            let a1 = 2.0 * ma * mb + SSIM_C1;
            let a2 = 2.0 * s.cov[i] + SSIM_C2;
            let b1 = ma * ma + mb * mb + SSIM_C1;
            let b2 = s.var_a[i] + s.var_b[i] + SSIM_C2;
            let inv = 1.0 / (b1 * b2);
            let val = a1 * a2 * inv;
            let d_a1 = g * a2 * inv;
            let d_a2 = g * a1 * inv;
            let d_b1 = -g * val / b1;
            let d_b2 = -g * val / b2;
            // cov = E_ab - μa μb, var = E_xx - μx².
            d_mu_a[i] = 2.0 * mb * d_a1 - 2.0 * mb * d_a2 + 2.0 * ma * d_b1 - 2.0 * ma * d_b2;
            d_mu_b[i] = 2.0 * ma * d_a1 - 2.0 * ma * d_a2 + 2.0 * mb * d_b1 - 2.0 * mb * d_b2;
            d_e_aa[i] = d_b2;
            d_e_bb[i] = d_b2;
            d_e_ab[i] = 2.0 * d_a2;
        }
        let bm_a = blur(&d_mu_a, w, h, &k);
        let bm_b = blur(&d_mu_b, w, h, &k);
        let b_aa = blur(&d_e_aa, w, h, &k);
        let b_bb = blur(&d_e_bb, w, h, &k);
        let b_ab = blur(&d_e_ab, w, h, &k);
        for i in 0..n {
            da.data[i * 3 + c] = bm_a[i] + 2.0 * ca[i] * b_aa[i] + cb[i] * b_ab[i];
            db.data[i * 3 + c] = bm_b[i] + 2.0 * cb[i] * b_bb[i] + ca[i] * b_ab[i];
        }
    }
    Ok((da, db))
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(a.l1_distance(b))
}

/// Mean over points of the mean over all 2K coordinates of `max(0, |c| - 1)`.
pub fn l_sc(cloud: &GaussianCloud) -> f64 {
    if cloud.is_empty() || cloud.k == 0 {
        return 0.0;
    }
    let per_point = 2.0 * cloud.k as f64;
    let sum: f64 = cloud
        .points
        .iter()
        .map(|p| {
            p.sampling
                .iter()
                .flat_map(|c| c.iter())
                .map(|v| (v.abs() - 1.0).max(0.0))
                .sum::<f64>()
                / per_point
        })
        .sum();
    sum / cloud.len() as f64
}

/// dL/dsc for `d_out · l_sc(cloud)`.
pub fn l_sc_backward(cloud: &GaussianCloud, d_out: f64) -> Vec<Vec<[f64; 2]>> {
    let scale = if cloud.is_empty() || cloud.k == 0 {
        0.0
    } else {
        d_out / (2.0 * cloud.k as f64 * cloud.len() as f64)
    };
    cloud
        .points
        .iter()
        .map(|p| {
            p.sampling
                .iter()
                .map(|c| {
                    c.map(|v| {
                        if v.abs() > 1.0 {
                            scale * v.signum()
                        } else {
                            0.0
                        }
                    })
                })
                .collect()
        })
        .collect()
}

/// mean((VM - 1)²)
pub fn l_vm(vm: &Array2<f64>) -> f64 {
    vm.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / vm.len().max(1) as f64
}

pub fn l_vm_backward(vm: &Array2<f64>, d_out: f64) -> Array2<f64> {
    let n = vm.len().max(1) as f64;
    vm.mapv(|v| d_out * 2.0 * (v - 1.0) / n)
}

fn check_mask(image: &Image, vm: &Array2<f64>) -> Result<()> {
    if vm.dim() != (image.height, image.width) {
        return Err(Error::shape(format!(
            "visibility map {:?} vs image {}x{}",
            vm.dim(),
            image.width,
            image.height
        )));
    }
    Ok(())
}

fn apply_mask(image: &Image, vm: &Array2<f64>) -> Image {
    let mut out = image.clone();
    for (i, px) in out.data.chunks_exact_mut(3).enumerate() {
        let m = vm.as_slice().expect("row-major")[i];
        for v in px {
            *v *= m;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageLoss {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
}

/// `λ₁ L1(VM⊙I_r, VM⊙I_gt) + λ_SSIM (1 - SSIM(VM⊙I_r, VM⊙I_gt))`.
pub fn image_loss(rendered: &Image, target: &Image, vm: &Array2<f64>, w: &LossWeights) -> Result<ImageLoss> {
    rendered.check_same_shape(target)?;
    check_mask(rendered, vm)?;
    let mr = apply_mask(rendered, vm);
    let mg = apply_mask(target, vm);
    let l1v = mr.l1_distance(&mg);
    let s = ssim(&mr, &mg)?;
    Ok(ImageLoss {
        total: w.l1 * l1v + w.ssim * (1.0 - s),
        l1: l1v,
        ssim: s,
    })
}

/// Gradients of `d_out · image_loss` w.r.t. the rendered image and the
/// visibility map.
pub fn image_loss_backward(
    rendered: &Image,
    target: &Image,
    vm: &Array2<f64>,
    w: &LossWeights,
    d_out: f64,
) -> Result<(Image, Array2<f64>)> {
    rendered.check_same_shape(target)?;
    check_mask(rendered, vm)?;
    let mr = apply_mask(rendered, vm);
    let mg = apply_mask(target, vm);
    let n = mr.data.len() as f64;
    let (ds_r, ds_g) = ssim_backward(&mr, &mg, -w.ssim * d_out)?;
    let vms = vm.as_slice().expect("row-major");
    let mut d_rendered = Image::new(rendered.width, rendered.height);
    let mut d_vm = Array2::zeros(vm.dim());
    let dvs = d_vm.as_slice_mut().expect("row-major");
    for i in 0..mr.data.len() {
        let diff = mr.data[i] - mg.data[i];
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        let d_mr = w.l1 * d_out * sign / n + ds_r.data[i];
        let d_mg = -w.l1 * d_out * sign / n + ds_g.data[i];
        let p = i / 3;
        d_rendered.data[i] = vms[p] * d_mr;
        dvs[p] += rendered.data[i] * d_mr + target.data[i] * d_mg;
    }
    Ok((d_rendered, d_vm))
}

/// `L_c + λ_sc L_sc + λ_vm L_vm`.
pub fn total_loss(image_loss: f64, sampling: f64, visibility: f64, w: &LossWeights) -> f64 {
    image_loss + w.sampling * sampling + w.visibility * visibility
}

/// Partial derivatives of [`total_loss`] w.r.t. its three components.
pub fn total_loss_backward(w: &LossWeights) -> (f64, f64, f64) {
    (1.0, w.sampling, w.visibility)
}
