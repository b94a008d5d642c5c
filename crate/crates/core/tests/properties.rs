//! Randomized invariants of the geometry, rasterizer, sampling and loss
//! modules.

use gsw::appearance::fusion::{decode_color, DecoderInput, FusionNets};
use gsw::appearance::{assemble_dynamic_feature, bilinear_sample, FeatureStack, AF_DIM, FEATURE_CHANNELS};
use gsw::camera::{project_covariance, project_point, Camera, ProjectedGaussian, Sym2};
use gsw::dataio::psnr;
use gsw::frame::Image;
use gsw::losses::{image_loss, l_sc, l_vm, ssim, LossWeights};
use gsw::rasterizer::{render, RenderInput, MAX_SIGMA, TRANSMITTANCE_CUTOFF};
use gsw::scene::{
    build_covariance, densify_and_prune, gaussian_weight, rotation_from_quaternion, DensifyParams,
    DensifyStats, GaussianCloud, GaussianPoint, SF_DIM,
};
use nalgebra::{Matrix3, SymmetricEigen, Vector2, Vector3};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_quaternion() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-1.0..1.0f64)
        .prop_filter("non-degenerate", |q| q.iter().map(|c| c * c).sum::<f64>() > 1e-2)
        .prop_map(|q| {
            let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            q.map(|c| c / n)
        })
}

fn scales() -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-3.0..2.0f64).prop_map(|l| Vector3::new(l[0].exp(), l[1].exp(), l[2].exp()))
}

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-range..range).prop_map(|v| Vector3::new(v[0], v[1], v[2]))
}

fn camera(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Camera {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let eye = Vector3::new(3.5 * theta.cos(), 3.5 * theta.sin(), rng.random_range(-1.0..2.0));
    Camera::look_at(eye, Vector3::zeros(), Vector3::z(), width as f64, width, height).unwrap()
}

fn point(position: Vector3<f64>, k: usize) -> GaussianPoint {
    GaussianPoint {
        position,
        rotation: [1.0, 0.0, 0.0, 0.0],
        log_scale: Vector3::repeat(-2.0),
        opacity_logit: 0.0,
        intrinsic: vec![0.0; SF_DIM],
        sampling: vec![[0.0; 2]; k],
    }
}

/// Random screen-space scene: `n` Gaussians over a `w`×`h` image.
fn random_scene(seed: u64, n: usize, w: usize, h: usize) -> RenderInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut projected = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.random_range(0.5..30.0);
        let b: f64 = rng.random_range(0.5..30.0);
        let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (s, c) = t.sin_cos();
        projected.push(ProjectedGaussian {
            pixel_mean: Vector2::new(rng.random_range(-4.0..w as f64 + 4.0), rng.random_range(-4.0..h as f64 + 4.0)),
            // Coarse depths so ties occur and the index tiebreak is exercised.
            depth: (rng.random_range(1.0..10.0f64) * 4.0).round() / 4.0,
            cov2d: Sym2::new(a * c * c + b * s * s, (a - b) * s * c, a * s * s + b * c * c),
            valid: rng.random::<f64>() > 0.05,
        });
    }
    let opacity = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let colors = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let bg = [rng.random(), rng.random(), rng.random()];
    RenderInput::new(projected, opacity, colors, w, h, bg)
}

/// Per pixel: every valid Gaussian in (depth, index) order, blended without
/// tiles or culling.
fn brute_force(input: &RenderInput) -> (Vec<f64>, Vec<f64>) {
    let mut order: Vec<usize> = (0..input.projected.len()).filter(|&i| input.projected[i].valid).collect();
    order.sort_by(|&a, &b| {
        input.projected[a]
            .depth
            .partial_cmp(&input.projected[b].depth)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut image = Vec::with_capacity(input.width * input.height * 3);
    let mut trans = Vec::with_capacity(input.width * input.height);
    for y in 0..input.height {
        for x in 0..input.width {
            let mut t = 1.0;
            let mut rgb = [0.0; 3];
            for &i in &order {
                let g = &input.projected[i];
                let c = g.cov2d;
                let det = c.xx * c.yy - c.xy * c.xy;
                let (ia, ib, ic) = (c.yy / det, -c.xy / det, c.xx / det);
                let dx = x as f64 - g.pixel_mean.x;
                let dy = y as f64 - g.pixel_mean.y;
                let w = (-0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy)).exp();
                let sigma = (input.opacity[i] * w).min(MAX_SIGMA);
                if t * (1.0 - sigma) < TRANSMITTANCE_CUTOFF {
                    break;
                }
                for ch in 0..3 {
                    rgb[ch] += input.colors[i][ch] * sigma * t;
                }
                t *= 1.0 - sigma;
            }
            for ch in 0..3 {
                image.push(rgb[ch] + t * input.background[ch]);
            }
            trans.push(t);
        }
    }
    (image, trans)
}

/// Scalar four-corner bilinear lookup under the corner-aligned convention.
fn bilinear_oracle(map: &Array3<f64>, u: f64, v: f64) -> Vec<f64> {
    let (c, h, w) = map.dim();
    let gx = (u.clamp(-1.0, 1.0) + 1.0) / 2.0 * (w - 1) as f64;
    let gy = (v.clamp(-1.0, 1.0) + 1.0) / 2.0 * (h - 1) as f64;
    let x0 = (gx.floor() as usize).min(w.saturating_sub(2));
    let y0 = (gy.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = gx - x0 as f64;
    let fy = gy - y0 as f64;
    (0..c)
        .map(|ch| {
            map[(ch, y0, x0)] * (1.0 - fx) * (1.0 - fy)
                + map[(ch, y0, x1)] * fx * (1.0 - fy)
                + map[(ch, y1, x0)] * (1.0 - fx) * fy
                + map[(ch, y1, x1)] * fx * fy
        })
        .collect()
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::from_vec(w, h, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_symmetric_psd_with_scale_determinant(q in unit_quaternion(), s in scales()) {
        let sigma = build_covariance(&q, &s).unwrap();
        prop_assert_eq!(sigma, sigma.transpose());
        let eig = SymmetricEigen::new(sigma).eigenvalues;
        prop_assert!(eig.min() >= -1e-9 * eig.max().max(1.0));
        let det = (s.x * s.y * s.z).powi(2);
        prop_assert!((sigma.determinant() - det).abs() <= 1e-8 * det.max(1e-12) + 1e-15);
    }

    #[test]
    fn weight_invariant_under_joint_rotation(
        q in unit_quaternion(), r in unit_quaternion(), s in scales(),
        x in vec3(2.0), mean in vec3(2.0),
    ) {
        let sigma = build_covariance(&q, &s).unwrap();
        let rot = rotation_from_quaternion(&r);
        let a = gaussian_weight(&x, &mean, &sigma).unwrap();
        let b = gaussian_weight(&(rot * x), &(rot * mean), &(rot * sigma * rot.transpose())).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
        prop_assert!(a > 0.0 || a == 0.0);
        prop_assert!(a <= 1.0);
    }

    #[test]
    fn densify_keeps_untouched_points_bitwise(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 2;
        let points: Vec<GaussianPoint> = (0..n)
            .map(|_| {
                let mut p = point(Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)), k);
                p.log_scale = Vector3::from_fn(|_, _| rng.random_range(-6.0..-1.0));
                p.opacity_logit = rng.random_range(-7.0..3.0);
                p.intrinsic = (0..SF_DIM).map(|_| rng.random()).collect();
                p.sampling = vec![[rng.random(), rng.random()]; k];
                p
            })
            .collect();
        let cloud = GaussianCloud::new(points, k).unwrap();
        let mut stats = DensifyStats::default();
        stats.reset(n);
        for i in 0..n {
            stats.record(i, rng.random_range(0.0..8e-4));
        }
        let params = DensifyParams::default();
        let Ok(out) = densify_and_prune(&cloud, &stats, &params, &mut rng) else {
            // Everything pruned.
            prop_assert!(cloud.points.iter().all(|p| p.opacity() < params.min_opacity));
            return Ok(());
        };
        for i in 0..n {
            let p = &cloud.points[i];
            let untouched = stats.mean(i) <= params.grad_threshold && p.opacity() >= params.min_opacity;
            if untouched {
                let at = out.origin.iter().position(|o| *o == Some(i));
                prop_assert!(at.is_some(), "untouched point {} missing", i);
                prop_assert_eq!(&out.cloud.points[at.unwrap()], p);
            }
        }
        for (o, p) in out.origin.iter().zip(&out.cloud.points) {
            if let Some(j) = o {
                prop_assert_eq!(p, &cloud.points[*j]);
            }
        }
    }

    #[test]
    fn projected_covariance_eigenvalues_above_dilation(
        q in unit_quaternion(), s in scales(), x in vec3(1.0), seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = camera(&mut rng, 32, 24);
        let sigma = build_covariance(&q, &s).unwrap();
        let c = project_covariance(&sigma, &x, &cam).unwrap();
        let (lo, _) = c.eigenvalues();
        prop_assert!(lo >= 0.3 - 1e-9 * c.xx.abs().max(c.yy.abs()).max(1.0), "{}", lo);
    }

    #[test]
    fn projection_scales_with_intrinsics(x in vec3(1.0), seed in any::<u64>(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = camera(&mut rng, 20, 16);
        let kf = k as f64;
        let scaled = Camera::new(
            cam.fx * kf, cam.fy * kf, cam.cx * kf, cam.cy * kf,
            cam.width * k, cam.height * k, cam.world_to_cam, cam.near_clip,
        ).unwrap();
        let a = project_point(&x, &cam);
        let b = project_point(&x, &scaled);
        prop_assert_eq!(a.valid, b.valid);
        if a.valid {
            prop_assert!((b.pixel - a.pixel * kf).norm() <= 1e-9 * (1.0 + b.pixel.norm()));
        }
    }

    #[test]
    fn tiled_render_matches_brute_force(seed in any::<u64>(), n in 0usize..=50) {
        let mut input = random_scene(seed, n, 32, 32);
        input.culling = false;
        let out = render(&input).unwrap();
        let (image, trans) = brute_force(&input);
        for (a, b) in out.image.data.iter().zip(&image) {
            prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
        for (a, b) in out.transmittance.iter().zip(&trans) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn render_bounded_and_transmittance_in_unit_interval(seed in any::<u64>(), n in 0usize..60) {
        let input = random_scene(seed, n, 37, 21);
        let out = render(&input).unwrap();
        prop_assert!(out.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(out.transmittance.iter().all(|t| (0.0..=1.0).contains(t)));
    }

    #[test]
    fn appending_gaussian_behind_never_raises_transmittance(seed in any::<u64>(), n in 1usize..30) {
        let mut input = random_scene(seed, n, 24, 24);
        input.culling = false;
        let before = render(&input).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        input.projected.push(ProjectedGaussian {
            pixel_mean: Vector2::new(rng.random_range(0.0..24.0), rng.random_range(0.0..24.0)),
            depth: 100.0,
            cov2d: Sym2::new(20.0, 3.0, 15.0),
            valid: true,
        });
        input.opacity.push(rng.random_range(0.1..1.0));
        input.colors.push([0.5; 3]);
        let after = render(&input).unwrap();
        for (a, b) in after.transmittance.iter().zip(&before.transmittance) {
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn render_independent_of_tile_size_without_culling(seed in any::<u64>(), n in 0usize..30, tile in 1usize..20) {
        let mut input = random_scene(seed, n, 29, 19);
        input.culling = false;
        let reference = render(&input).unwrap();
        input.tile_size = tile;
        let other = render(&input).unwrap();
        prop_assert_eq!(reference.image.data, other.image.data);
        prop_assert_eq!(reference.transmittance, other.transmittance);
    }

    #[test]
    fn bilinear_matches_four_corner_oracle(
        seed in any::<u64>(), h in 2usize..9, w in 2usize..9, u in -1.2..1.2f64, v in -1.2..1.2f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = Array3::from_shape_fn((FEATURE_CHANNELS, h, w), |_| rng.random_range(-1.0..1.0));
        let got = bilinear_sample(&map, &Vector2::new(u, v));
        let want = bilinear_oracle(&map, u, v);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn bilinear_linear_between_columns(seed in any::<u64>(), h in 2usize..7, w in 2usize..7, col in 0usize..6, t in 0.0..1.0f64, row in 0usize..6) {
        let col = col % (w - 1);
        let row = row % h;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = Array3::from_shape_fn((FEATURE_CHANNELS, h, w), |_| rng.random_range(-1.0..1.0));
        let to_u = |g: f64| 2.0 * g / (w - 1) as f64 - 1.0;
        let vv = 2.0 * row as f64 / (h - 1) as f64 - 1.0;
        let left = bilinear_sample(&map, &Vector2::new(to_u(col as f64), vv));
        let right = bilinear_sample(&map, &Vector2::new(to_u(col as f64 + 1.0), vv));
        let mid = bilinear_sample(&map, &Vector2::new(to_u(col as f64 + t), vv));
        for ch in 0..FEATURE_CHANNELS {
            prop_assert_eq!(left[ch], map[(ch, row, col)]);
            let lerp = left[ch] + t * (right[ch] - left[ch]);
            prop_assert!((mid[ch] - lerp).abs() <= 1e-9);
        }
    }

    #[test]
    fn decoded_color_strictly_inside_unit_cube(seed in any::<u64>(), scale in 0.1..5.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = if rng.random::<bool>() { DecoderInput::ViewDirection } else { DecoderInput::Position };
        let nets = FusionNets::new(3, input, &mut rng);
        let af: Vec<f64> = (0..AF_DIM).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let x = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let rgb = decode_color(&af, &x, &Vector3::new(0.0, -3.0, 1.0), &nets).unwrap();
        prop_assert!(rgb.iter().all(|c| *c > 0.0 && *c < 1.0));
    }

    #[test]
    fn dynamic_feature_length_and_zero_weight(seed in any::<u64>(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = camera(&mut rng, 12, 10);
        let mut stack = FeatureStack::zeros(k, 10, 12);
        stack.projection.mapv_inplace(|_| rng.random());
        for m in &mut stack.maps {
            m.mapv_inplace(|_| rng.random());
        }
        let mut p = point(Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)), k);
        p.sampling = (0..k).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let df = assemble_dynamic_feature(&p, &stack, Some(&cam), 1.0, ).unwrap();
        prop_assert_eq!(df.len(), FEATURE_CHANNELS * (k + 1));
        let zero = assemble_dynamic_feature(&p, &stack, Some(&cam), 0.0).unwrap();
        prop_assert!(zero.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn losses_nonnegative(seed in any::<u64>(), w in 4usize..14, h in 4usize..14) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(&mut rng, w, h);
        let b = random_image(&mut rng, w, h);
        let vm = Array2::from_shape_fn((h, w), |_| rng.random::<f64>());
        let s = ssim(&a, &b).unwrap();
        prop_assert!(s <= 1.0 + 1e-12 && 1.0 - s >= -1e-12);
        prop_assert!(image_loss(&a, &b, &vm, &LossWeights::default()).unwrap().total >= 0.0);
        prop_assert!(l_vm(&vm) >= 0.0);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!(psnr(&a, &b).unwrap() >= 0.0);
    }

    #[test]
    fn image_l1_monotone_in_mask(seed in any::<u64>(), w in 4usize..12, h in 4usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(&mut rng, w, h);
        let b = random_image(&mut rng, w, h);
        let small = Array2::from_shape_fn((h, w), |_| rng.random::<f64>());
        let large = small.mapv(|v| v + (1.0 - v) * 0.5);
        let weights = LossWeights::default();
        let lo = image_loss(&a, &b, &small, &weights).unwrap().l1;
        let hi = image_loss(&a, &b, &large, &weights).unwrap().l1;
        prop_assert!(hi >= lo);
    }

    #[test]
    fn sampling_loss_permutation_invariant(seed in any::<u64>(), n in 1usize..20, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<GaussianPoint> = (0..n)
            .map(|_| {
                let mut p = point(Vector3::zeros(), k);
                p.sampling = (0..k).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
                p
            })
            .collect();
        let cloud = GaussianCloud::new(points.clone(), k).unwrap();
        let mut shuffled = points;
        shuffled.reverse();
        shuffled.rotate_left(n / 2);
        let other = GaussianCloud::new(shuffled, k).unwrap();
        prop_assert!((l_sc(&cloud) - l_sc(&other)).abs() <= 1e-15);
        prop_assert!(l_sc(&cloud) >= 0.0);
    }
}

#[test]
fn weight_on_identity_covariance() {
    let w = gaussian_weight(&Vector3::new(1.0, 0.0, 0.0), &Vector3::zeros(), &Matrix3::identity()).unwrap();
    assert!((w - (-0.5f64).exp()).abs() < 1e-15);
}
