//! Tile-based front-to-back alpha blending of projected Gaussians and its
//! analytic backward pass.
//!
//! Forward: every valid Gaussian is depth-sorted once (ties broken by index)
//! and binned into the tiles its 3σ box touches. Each pixel walks its tile's
//! list in order, blending `c σ T` until the transmittance would drop below
//! [`TRANSMITTANCE_CUTOFF`].
//!
//! Backward replays each pixel back to front from the stored final
//! transmittance and contributor count. Tiles accumulate gradients into
//! buffers aligned with their own lists; the buffers are reduced in tile order
//! so the result does not depend on scheduling.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::camera::{ProjectedGaussian, Sym2};
use crate::error::{Error, Result};
use crate::frame::Image;

pub const DEFAULT_TILE_SIZE: usize = 16;
pub const MAX_SIGMA: f64 = 0.99;
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;
/// Falloff exponents below this are treated as zero weight (G < 1.4e-11).
pub const MIN_FALLOFF_POWER: f64 = -25.0;

#[derive(Clone, Debug)]
pub struct RenderInput {
    pub projected: Vec<ProjectedGaussian>,
    pub opacity: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub tile_size: usize,
    /// Drop Gaussians from tiles their 3σ box misses. Disabling this makes
    /// every tile traverse every valid Gaussian.
    pub culling: bool,
}

impl RenderInput {
    pub fn new(
        projected: Vec<ProjectedGaussian>,
        opacity: Vec<f64>,
        colors: Vec<[f64; 3]>,
        width: usize,
        height: usize,
        background: [f64; 3],
    ) -> Self {
        Self {
            projected,
            opacity,
            colors,
            width,
            height,
            background,
            tile_size: DEFAULT_TILE_SIZE,
            culling: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::contract("render target has zero size"));
        }
        if self.tile_size == 0 {
            return Err(Error::contract("tile size must be at least 1"));
        }
        let n = self.projected.len();
        if self.opacity.len() != n || self.colors.len() != n {
            return Err(Error::contract(format!(
                "render input lists misaligned: {} projections, {} opacities, {} colors",
                n,
                self.opacity.len(),
                self.colors.len()
            )));
        }
        Ok(())
    }

    fn tiles_x(&self) -> usize {
        self.width.div_ceil(self.tile_size)
    }

    fn tiles_y(&self) -> usize {
        self.height.div_ceil(self.tile_size)
    }
}

/// Per-tile contributor lists, in depth order.
#[derive(Clone, Debug, PartialEq)]
pub struct TileBins {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub ranges: Vec<(usize, usize)>,
    pub entries: Vec<u32>,
}

impl TileBins {
    pub fn tile(&self, t: usize) -> &[u32] {
        let (a, b) = self.ranges[t];
        &self.entries[a..b]
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Image,
    /// Transmittance left after the last blended Gaussian, per pixel.
    pub transmittance: Vec<f64>,
    /// Length of the tile-list prefix traversed at each pixel.
    pub contributors: Vec<u32>,
    pub bins: TileBins,
    conics: Vec<Sym2>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrads {
    pub d_mean: Vec<Vector2<f64>>,
    pub d_cov: Vec<Sym2>,
    pub d_opacity: Vec<f64>,
    pub d_color: Vec<[f64; 3]>,
}

impl RenderGrads {
    fn zeros(n: usize) -> Self {
        Self {
            d_mean: vec![Vector2::zeros(); n],
            d_cov: vec![Sym2::default(); n],
            d_opacity: vec![0.0; n],
            d_color: vec![[0.0; 3]; n],
        }
    }
}

/// Three-sigma screen radius along the major axis.
fn screen_radius(cov: &Sym2) -> f64 {
    let (_, hi) = cov.eigenvalues();
    (3.0 * hi.max(0.0).sqrt()).ceil()
}

fn bin_gaussians(input: &RenderInput, conics: &[Option<Sym2>]) -> TileBins {
    let (tx, ty) = (input.tiles_x(), input.tiles_y());
    let mut order: Vec<usize> = (0..input.projected.len())
        .filter(|&i| conics[i].is_some())
        .collect();
    order.sort_by(|&a, &b| {
        input.projected[a]
            .depth
            .total_cmp(&input.projected[b].depth)
            .then(a.cmp(&b))
    });

    let mut per_tile: Vec<Vec<u32>> = vec![Vec::new(); tx * ty];
    let ts = input.tile_size as f64;
    for &i in &order {
        let g = &input.projected[i];
        let (x0, x1, y0, y1) = if input.culling {
            let r = screen_radius(&g.cov2d);
            let lo_x = ((g.pixel_mean.x - r) / ts).floor();
            let hi_x = ((g.pixel_mean.x + r) / ts).floor();
            let lo_y = ((g.pixel_mean.y - r) / ts).floor();
            let hi_y = ((g.pixel_mean.y + r) / ts).floor();
            if hi_x < 0.0 || hi_y < 0.0 || lo_x >= tx as f64 || lo_y >= ty as f64 {
                continue;
            }
            (
                lo_x.max(0.0) as usize,
                (hi_x as usize).min(tx - 1),
                lo_y.max(0.0) as usize,
                (hi_y as usize).min(ty - 1),
            )
        } else {
            (0, tx - 1, 0, ty - 1)
        };
        for y in y0..=y1 {
            for x in x0..=x1 {
                per_tile[y * tx + x].push(i as u32);
            }
        }
    }

    let mut ranges = Vec::with_capacity(tx * ty);
    let mut entries = Vec::new();
    for list in per_tile {
        let start = entries.len();
        entries.extend(list);
        ranges.push((start, entries.len()));
    }
    TileBins {
        tiles_x: tx,
        tiles_y: ty,
        ranges,
        entries,
    }
}

/// Per-entry data copied out in tile-list order so the pixel loops stream
/// through memory.
#[derive(Clone, Copy)]
struct Splat {
    mean: [f64; 2],
    conic: Sym2,
    opacity: f64,
    color: [f64; 3],
}

fn pack_tile(input: &RenderInput, conics: &[Sym2], list: &[u32]) -> Vec<Splat> {
    list.iter()
        .map(|&gi| {
            let gi = gi as usize;
            let m = input.projected[gi].pixel_mean;
            Splat {
                mean: [m.x, m.y],
                conic: conics[gi],
                opacity: input.opacity[gi],
                color: input.colors[gi],
            }
        })
        .collect()
}

/// `(G, dx, dy)`, or `None` when the weight is below the falloff floor.
#[inline]
fn falloff(s: &Splat, px: f64, py: f64) -> Option<(f64, f64, f64)> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let q = &s.conic;
    let power = -0.5 * (q.xx * dx * dx + 2.0 * q.xy * dx * dy + q.yy * dy * dy);
    (power >= MIN_FALLOFF_POWER).then(|| (power.exp(), dx, dy))
}

fn tile_pixels(input: &RenderInput, tile: usize, tiles_x: usize) -> impl Iterator<Item = (usize, usize)> {
    let ts = input.tile_size;
    let x0 = (tile % tiles_x) * ts;
    let y0 = (tile / tiles_x) * ts;
    let x1 = (x0 + ts).min(input.width);
    let y1 = (y0 + ts).min(input.height);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

struct PixelResult {
    index: usize,
    rgb: [f64; 3],
    transmittance: f64,
    contributors: u32,
}

pub fn render(input: &RenderInput) -> Result<RenderOutput> {
    input.validate()?;
    let conic_opts: Vec<Option<Sym2>> = input
        .projected
        .iter()
        .map(|g| if g.valid { g.cov2d.inverse() } else { None })
        .collect();
    let bins = bin_gaussians(input, &conic_opts);
    let conics: Vec<Sym2> = conic_opts.into_iter().map(Option::unwrap_or_default).collect();

    let tile_results: Vec<Vec<PixelResult>> = (0..bins.ranges.len())
        .into_par_iter()
        .map(|t| {
            let splats = pack_tile(input, &conics, bins.tile(t));
            tile_pixels(input, t, bins.tiles_x)
                .map(|(x, y)| {
                    let (px, py) = (x as f64, y as f64);
                    let mut t_acc = 1.0;
                    let mut rgb = [0.0; 3];
                    let mut n = 0u32;
                    for s in &splats {
                        let Some((g, _, _)) = falloff(s, px, py) else {
                            n += 1;
                            continue;
                        };
                        let sigma = (s.opacity * g).min(MAX_SIGMA);
                        let next_t = t_acc * (1.0 - sigma);
                        if next_t < TRANSMITTANCE_CUTOFF {
                            break;
                        }
                        for ch in 0..3 {
                            rgb[ch] += s.color[ch] * sigma * t_acc;
                        }
                        t_acc = next_t;
                        n += 1;
                    }
                    for ch in 0..3 {
                        rgb[ch] += t_acc * input.background[ch];
                    }
                    PixelResult {
                        index: y * input.width + x,
                        rgb,
                        transmittance: t_acc,
                        contributors: n,
                    }
                })
                .collect()
        })
        .collect();

    let npix = input.width * input.height;
    let mut image = Image::new(input.width, input.height);
    let mut transmittance = vec![1.0; npix];
    let mut contributors = vec![0u32; npix];
    for px in tile_results.into_iter().flatten() {
        image.data[px.index * 3..px.index * 3 + 3].copy_from_slice(&px.rgb);
        transmittance[px.index] = px.transmittance;
        contributors[px.index] = px.contributors;
    }
    Ok(RenderOutput {
        image,
        transmittance,
        contributors,
        bins,
        conics,
    })
}

#[derive(Clone, Copy, Default)]
struct EntryGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

pub fn render_backward(
    input: &RenderInput,
    output: &RenderOutput,
    grad_image: &Image,
) -> Result<RenderGrads> {
    input.validate()?;
    let npix = input.width * input.height;
    if grad_image.width != input.width
        || grad_image.height != input.height
        || output.image.width != input.width
        || output.image.height != input.height
        || output.transmittance.len() != npix
        || output.contributors.len() != npix
        || output.conics.len() != input.projected.len()
        || output.bins.tiles_x != input.tiles_x()
        || output.bins.tiles_y != input.tiles_y()
    {
        return Err(Error::contract(
            "render_backward replay metadata does not match the render input",
        ));
    }
    let bins = &output.bins;
    let conics = &output.conics;

    let tile_grads: Vec<Vec<EntryGrad>> = (0..bins.ranges.len())
        .into_par_iter()
        .map(|t| {
            let splats = pack_tile(input, conics, bins.tile(t));
            let mut acc = vec![EntryGrad::default(); splats.len()];
            for (x, y) in tile_pixels(input, t, bins.tiles_x) {
                let p = y * input.width + x;
                let n = output.contributors[p] as usize;
                let dpix = grad_image.pixel(x, y);
                if n == 0 || dpix == [0.0; 3] {
                    continue;
                }
                let (px, py) = (x as f64, y as f64);
                let mut t_acc = output.transmittance[p];
                // Color seen behind the current entry, normalized by the
                // transmittance in front of it.
                let mut behind = input.background;
                for k in (0..n).rev() {
                    let s = &splats[k];
                    let conic = &s.conic;
                    let Some((g, dx, dy)) = falloff(s, px, py) else {
                        continue;
                    };
                    let raw = s.opacity * g;
                    let sigma = raw.min(MAX_SIGMA);
                    t_acc /= 1.0 - sigma;
                    let c = &s.color;
                    let e = &mut acc[k];
                    let mut d_sigma = 0.0;
                    for ch in 0..3 {
                        e.color[ch] += sigma * t_acc * dpix[ch];
                        d_sigma += (c[ch] - behind[ch]) * dpix[ch];
                    }
                    d_sigma *= t_acc;
                    for ch in 0..3 {
                        behind[ch] = sigma * c[ch] + (1.0 - sigma) * behind[ch];
                    }
                    if raw >= MAX_SIGMA {
                        continue;
                    }
                    e.opacity += g * d_sigma;
                    let d_power = s.opacity * d_sigma * g;
                    // power = -½ dᵀ Q d with d = pixel - mean.
                    e.mean[0] += d_power * (conic.xx * dx + conic.xy * dy);
                    e.mean[1] += d_power * (conic.xy * dx + conic.yy * dy);
                    e.conic[0] += -0.5 * dx * dx * d_power;
                    e.conic[1] += -dx * dy * d_power;
                    e.conic[2] += -0.5 * dy * dy * d_power;
                }
            }
            acc
        })
        .collect();

    let n = input.projected.len();
    let mut grads = RenderGrads::zeros(n);
    let mut d_conic = vec![[0.0; 3]; n];
    for (t, acc) in tile_grads.iter().enumerate() {
        for (e, &gi) in acc.iter().zip(bins.tile(t)) {
            let gi = gi as usize;
            grads.d_mean[gi] += Vector2::new(e.mean[0], e.mean[1]);
            for j in 0..3 {
                d_conic[gi][j] += e.conic[j];
                grads.d_color[gi][j] += e.color[j];
            }
            grads.d_opacity[gi] += e.opacity;
        }
    }
    for gi in 0..n {
        let dq = d_conic[gi];
        if dq == [0.0; 3] {
            continue;
        }
        let q = &conics[gi];
        let qm = Matrix2::new(q.xx, q.xy, q.xy, q.yy);
        let gm = Matrix2::new(dq[0], 0.5 * dq[1], 0.5 * dq[1], dq[2]);
        let dc = -(qm * gm * qm);
        grads.d_cov[gi] = Sym2::new(dc[(0, 0)], dc[(0, 1)] + dc[(1, 0)], dc[(1, 1)]);
    }
    Ok(grads)
}
