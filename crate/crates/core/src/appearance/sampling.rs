//! Corner-aligned bilinear sampling of (C, H, W) feature maps.

use nalgebra::Vector2;
use ndarray::Array3;

const GRID_SNAP: f64 = 1e-9;

/// Four-neighbor lookup for one query.
#[derive(Clone, Copy, Debug)]
struct Taps {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// d(grid x)/du, zero when u was clamped.
    dx_du: f64,
    dy_dv: f64,
}

fn taps(uv: &Vector2<f64>, height: usize, width: usize) -> Taps {
    let axis = |c: f64, n: usize| -> (usize, usize, f64, f64) {
        if n == 1 {
            return (0, 0, 0.0, 0.0);
        }
        let clamped = c.clamp(-1.0, 1.0);
        let scale = 0.5 * (n as f64 - 1.0);
        let mut g = (clamped + 1.0) * scale;
        // Absorb rounding from the uv round trip so grid points hit exactly.
        let nearest = g.round();
        if (g - nearest).abs() < GRID_SNAP {
            g = nearest;
        }
        let i0 = (g.floor() as usize).min(n - 2);
        let d = if c.abs() > 1.0 { 0.0 } else { scale };
        (i0, i0 + 1, g - i0 as f64, d)
    };
    let (x0, x1, fx, dx_du) = axis(uv.x, width);
    let (y0, y1, fy, dy_dv) = axis(uv.y, height);
    Taps {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        dx_du,
        dy_dv,
    }
}

/// Samples every channel of `map` at `uv ∈ [-1, 1]²` (clamped), with u along
/// the width. `out` must have one slot per channel.
pub fn bilinear_sample_into(map: &Array3<f64>, uv: &Vector2<f64>, out: &mut [f64]) {
    let (c, h, w) = map.dim();
    debug_assert_eq!(out.len(), c);
    let t = taps(uv, h, w);
    let w00 = (1.0 - t.fx) * (1.0 - t.fy);
    let w10 = t.fx * (1.0 - t.fy);
    let w01 = (1.0 - t.fx) * t.fy;
    let w11 = t.fx * t.fy;
    for (ch, o) in out.iter_mut().enumerate() {
        *o = w00 * map[(ch, t.y0, t.x0)]
            + w10 * map[(ch, t.y0, t.x1)]
            + w01 * map[(ch, t.y1, t.x0)]
            + w11 * map[(ch, t.y1, t.x1)];
    }
}

pub fn bilinear_sample(map: &Array3<f64>, uv: &Vector2<f64>) -> Vec<f64> {
    let mut out = vec![0.0; map.dim().0];
    bilinear_sample_into(map, uv, &mut out);
    out
}

/// Scatters `d_out` into `d_map` and returns dL/duv.
pub fn bilinear_sample_backward(
    map: &Array3<f64>,
    uv: &Vector2<f64>,
    d_out: &[f64],
    d_map: &mut Array3<f64>,
) -> Vector2<f64> {
    let (_, h, w) = map.dim();
    let t = taps(uv, h, w);
    let w00 = (1.0 - t.fx) * (1.0 - t.fy);
    let w10 = t.fx * (1.0 - t.fy);
    let w01 = (1.0 - t.fx) * t.fy;
    let w11 = t.fx * t.fy;
    let (mut d_fx, mut d_fy) = (0.0, 0.0);
    for (ch, &g) in d_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let v00 = map[(ch, t.y0, t.x0)];
        let v10 = map[(ch, t.y0, t.x1)];
        let v01 = map[(ch, t.y1, t.x0)];
        let v11 = map[(ch, t.y1, t.x1)];
        d_map[(ch, t.y0, t.x0)] += w00 * g;
        d_map[(ch, t.y0, t.x1)] += w10 * g;
        d_map[(ch, t.y1, t.x0)] += w01 * g;
        d_map[(ch, t.y1, t.x1)] += w11 * g;
        d_fx += g * ((v10 - v00) * (1.0 - t.fy) + (v11 - v01) * t.fy);
        d_fy += g * ((v01 - v00) * (1.0 - t.fx) + (v11 - v10) * t.fx);
    }
    Vector2::new(d_fx * t.dx_du, d_fy * t.dy_dv)
}
