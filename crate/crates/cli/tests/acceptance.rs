//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Training runs use `GSW_ACCEPTANCE_ITERATIONS` iterations (default
//! [`DEFAULT_ITERATIONS`]).

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use gsw::appearance::checkpoint::load_checkpoint;
use gsw::appearance::{bilinear_sample, FEATURE_CHANNELS};
use gsw::camera::{ProjectedGaussian, Sym2};
use gsw::dataio::{load_dataset, load_scene, Dataset};
use gsw::frame::Image;
use gsw::gradcheck::{self, DiffOp};
use gsw::losses::{image_loss, l_sc, l_vm, ssim, total_loss, LossWeights};
use gsw::pipeline::{render_uncached, Reference};
use gsw::rasterizer::{render, RenderInput, MAX_SIGMA, TRANSMITTANCE_CUTOFF};
use gsw::scene::{GaussianCloud, GaussianPoint, SF_DIM};
use gsw_cli::{
    cmd_eval, cmd_generate, cmd_render, cmd_train, EvalArgs, ModelArgs, ReferenceArgs, RenderArgs,
    RunConfig, CHECKPOINT_FILE, SCENE_FILE,
};
use nalgebra::{Vector2, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DEFAULT_ITERATIONS: usize = 2000;
const SEEDS: [u64; 3] = [0, 1, 2];
const DATASET_SEED: u64 = 0;

const GRADCHECK_TRIALS: usize = 100;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(300);
const RASTER_SCENES: usize = 50;
const RASTER_MAX_GAUSSIANS: usize = 50;
const RASTER_SIZE: usize = 32;
const RASTER_TOLERANCE: f64 = 1e-6;
const BILINEAR_QUERIES: usize = 1000;
const BILINEAR_TOLERANCE: f64 = 1e-7;
const BASELINE_MARGIN_DB: f64 = 1.0;
const RUN_BUDGET: Duration = Duration::from_secs(30 * 60);
const VM_GAP: f64 = 0.15;
const SC_BOUND: f64 = 1.05;
const SC_INSIDE_FRACTION: f64 = 0.99;
const SC_LOSS_LIMIT: f64 = 1e-3;
const CACHE_MIN_POINTS: usize = 2000;
const CACHE_SPEEDUP: f64 = 1.5;
const TUNE_WEIGHTS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() {
    let iterations = std::env::var("GSW_ACCEPTANCE_ITERATIONS")
        .ok()
        .map(|v| v.parse().expect("GSW_ACCEPTANCE_ITERATIONS must be an integer"))
        .unwrap_or(DEFAULT_ITERATIONS);
    let criteria: [(&str, &dyn Fn(&Training) -> Outcome); 9] = [
        ("gradient integrity", &|_| gradient_integrity()),
        ("rasterizer oracle", &|_| rasterizer_oracle()),
        ("sampling oracle", &|_| sampling_oracle()),
        ("end-to-end reconstruction", &reconstruction),
        ("visibility map", &visibility_map),
        ("sampling regularizer", &sampling_regularizer),
        ("cache fast path", &cache_fast_path),
        ("tuning sanity", &tuning_sanity),
        ("loss formulas", &|_| loss_formulas()),
    ];
    let training = Training::run(iterations);
    let mut failed = 0;
    for (i, (name, criterion)) in criteria.iter().enumerate() {
        let o = criterion(&training);
        failed += usize::from(!o.pass);
        println!(
            "criterion {} {name}: {} ({})",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

/// Every training run the end-to-end criteria need, on one generated
/// default dataset.
struct Training {
    _dir: tempfile::TempDir,
    dataset_dir: PathBuf,
    dataset: Dataset,
    iterations: usize,
    /// Per variant, the mean test PSNR and wall time of each seed.
    full: Vec<(f64, Duration)>,
    baseline: Vec<(f64, Duration)>,
    freeze_sc: Vec<(f64, Duration)>,
    /// Output directory of the full model trained with the first seed.
    full_run: PathBuf,
}

const BASELINE_KEYS: &str = "disable_separation = true\nfreeze_sc = true\ndisable_k_maps = true\n";
const FREEZE_SC_KEYS: &str = "freeze_sc = true\n";

fn config(dataset: &Path, output: &Path, iterations: usize, extra: &str) -> RunConfig {
    let text = format!(
        "dataset = \"{}\"\noutput = \"{}\"\niterations = {iterations}\neval_interval = {iterations}\n{extra}",
        dataset.display(),
        output.display()
    );
    RunConfig::parse(&text, Path::new("acceptance.toml")).expect("acceptance config parses")
}

fn mean_psnr(table: &str) -> f64 {
    let mean = table.lines().last().expect("table has a mean row");
    let fields: Vec<&str> = mean.split_whitespace().collect();
    assert_eq!(fields[0], "mean");
    fields[1].parse().expect("numeric PSNR")
}

fn model_args(run: &Path) -> ModelArgs {
    ModelArgs {
        scene: run.join(SCENE_FILE),
        checkpoint: run.join(CHECKPOINT_FILE),
        config: None,
    }
}

impl Training {
    fn run(iterations: usize) -> Self {
        let dir = tempfile::tempdir().expect("temp dir");
        let dataset_dir = dir.path().join("dataset");
        let mut generate = config(&dataset_dir, dir.path(), iterations, "");
        generate.seed = DATASET_SEED;
        cmd_generate(&generate).expect("dataset generation");
        let dataset = load_dataset(&dataset_dir).expect("dataset loads");

        let train_variant = |name: &str, extra: &str| -> Vec<(f64, Duration)> {
            SEEDS
                .iter()
                .map(|&seed| {
                    let out = dir.path().join(format!("{name}_{seed}"));
                    let mut c = config(&dataset_dir, &out, iterations, extra);
                    c.seed = seed;
                    let start = Instant::now();
                    cmd_train(&c).expect("training run");
                    let elapsed = start.elapsed();
                    let table = cmd_eval(&EvalArgs {
                        model: model_args(&out),
                        dataset: Some(dataset_dir.clone()),
                    })
                    .expect("evaluation");
                    let psnr = mean_psnr(&table);
                    eprintln!("trained {name} seed {seed}: {psnr:.3} dB in {elapsed:.1?}");
                    (psnr, elapsed)
                })
                .collect()
        };
        let full = train_variant("full", "");
        let baseline = train_variant("baseline", BASELINE_KEYS);
        let freeze_sc = train_variant("freeze_sc", FREEZE_SC_KEYS);
        let full_run = dir.path().join(format!("full_{}", SEEDS[0]));
        Self {
            _dir: dir,
            dataset_dir,
            dataset,
            iterations,
            full,
            baseline,
            freeze_sc,
            full_run,
        }
    }

    fn full_model(&self) -> (GaussianCloud, gsw::appearance::AppearanceModel) {
        (
            load_scene(&self.full_run.join(SCENE_FILE)).expect("scene"),
            load_checkpoint(&self.full_run.join(CHECKPOINT_FILE)).expect("checkpoint"),
        )
    }
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut failing = Vec::new();
    let mut worst: f64 = 0.0;
    for (i, op) in DiffOp::ALL.iter().enumerate() {
        match gradcheck::check(*op, GRADCHECK_TRIALS, 0xacc0 + i as u64) {
            Ok(r) => {
                worst = worst.max(r.worst);
                if !r.passed() {
                    failing.push(format!("{} ({} of {} failed)", op.name(), r.failures, r.trials));
                }
            }
            Err(e) => failing.push(format!("{}: {e}", op.name())),
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failing.is_empty() && elapsed < GRADCHECK_BUDGET,
        format!(
            "{} ops x {GRADCHECK_TRIALS} trials, worst relative error {worst:.2e} <= {:.0e}, {elapsed:.1?} < {GRADCHECK_BUDGET:?}{}",
            DiffOp::ALL.len(),
            gradcheck::MAX_RELATIVE_ERROR,
            if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
        ),
    )
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize, size: usize) -> RenderInput {
    let mut projected = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.random_range(0.5..30.0);
        let b: f64 = rng.random_range(0.5..30.0);
        let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (s, c) = t.sin_cos();
        projected.push(ProjectedGaussian {
            pixel_mean: Vector2::new(
                rng.random_range(-4.0..size as f64 + 4.0),
                rng.random_range(-4.0..size as f64 + 4.0),
            ),
            depth: rng.random_range(1.0..10.0),
            cov2d: Sym2::new(a * c * c + b * s * s, (a - b) * s * c, a * s * s + b * c * c),
            valid: true,
        });
    }
    let opacity = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let colors = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let bg = [rng.random(), rng.random(), rng.random()];
    let mut input = RenderInput::new(projected, opacity, colors, size, size, bg);
    input.culling = false;
    input
}

/// Every Gaussian at every pixel in (depth, index) order.
fn brute_force(input: &RenderInput) -> Vec<f64> {
    let mut order: Vec<usize> = (0..input.projected.len()).collect();
    order.sort_by(|&a, &b| {
        input.projected[a]
            .depth
            .partial_cmp(&input.projected[b].depth)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut image = Vec::with_capacity(input.width * input.height * 3);
    for y in 0..input.height {
        for x in 0..input.width {
            let mut t = 1.0;
            let mut rgb = [0.0; 3];
            for &i in &order {
                let g = &input.projected[i];
                let c = g.cov2d;
                let det = c.xx * c.yy - c.xy * c.xy;
                let dx = x as f64 - g.pixel_mean.x;
                let dy = y as f64 - g.pixel_mean.y;
                let q = (c.yy * dx * dx - 2.0 * c.xy * dx * dy + c.xx * dy * dy) / det;
                let sigma = (input.opacity[i] * (-0.5 * q).exp()).min(MAX_SIGMA);
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
        }
    }
    image
}

fn rasterizer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1e);
    let mut worst: f64 = 0.0;
    for _ in 0..RASTER_SCENES {
        let n = rng.random_range(1..=RASTER_MAX_GAUSSIANS);
        let input = random_scene(&mut rng, n, RASTER_SIZE);
        let tiled = render(&input).expect("render");
        for (a, b) in tiled.image.data.iter().zip(brute_force(&input)) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        worst <= RASTER_TOLERANCE,
        format!(
            "{RASTER_SCENES} scenes of <= {RASTER_MAX_GAUSSIANS} Gaussians at {RASTER_SIZE}x{RASTER_SIZE}, max channel error {worst:.2e} <= {RASTER_TOLERANCE:.0e}"
        ),
    )
}

/// Four-corner bilinear lookup with corner-aligned normalized coordinates.
fn four_corner(map: &Array3<f64>, u: f64, v: f64) -> Vec<f64> {
    let (c, h, w) = map.dim();
    let gx = (u.clamp(-1.0, 1.0) + 1.0) / 2.0 * (w - 1) as f64;
    let gy = (v.clamp(-1.0, 1.0) + 1.0) / 2.0 * (h - 1) as f64;
    let x0 = (gx.floor() as usize).min(w - 2);
    let y0 = (gy.floor() as usize).min(h - 2);
    let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
    (0..c)
        .map(|ch| {
            map[(ch, y0, x0)] * (1.0 - fx) * (1.0 - fy)
                + map[(ch, y0, x0 + 1)] * fx * (1.0 - fy)
                + map[(ch, y0 + 1, x0)] * (1.0 - fx) * fy
                + map[(ch, y0 + 1, x0 + 1)] * fx * fy
        })
        .collect()
}

fn sampling_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xb111);
    let mut worst: f64 = 0.0;
    for _ in 0..BILINEAR_QUERIES {
        let (h, w) = (rng.random_range(2..20), rng.random_range(2..20));
        let map = Array3::from_shape_fn((FEATURE_CHANNELS, h, w), |_| rng.random_range(-2.0..2.0));
        let (u, v) = (rng.random_range(-1.1..1.1), rng.random_range(-1.1..1.1));
        let got = bilinear_sample(&map, &Vector2::new(u, v));
        for (a, b) in got.iter().zip(four_corner(&map, u, v)) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        worst <= BILINEAR_TOLERANCE,
        format!("{BILINEAR_QUERIES} queries, max error {worst:.2e} <= {BILINEAR_TOLERANCE:.0e}"),
    )
}

fn mean(runs: &[(f64, Duration)]) -> f64 {
    runs.iter().map(|r| r.0).sum::<f64>() / runs.len() as f64
}

fn reconstruction(t: &Training) -> Outcome {
    let (full, base, freeze) = (mean(&t.full), mean(&t.baseline), mean(&t.freeze_sc));
    let slowest = t
        .full
        .iter()
        .chain(&t.baseline)
        .chain(&t.freeze_sc)
        .map(|r| r.1)
        .max()
        .unwrap_or_default();
    let pass = full - base >= BASELINE_MARGIN_DB && full > freeze && slowest <= RUN_BUDGET;
    let list = |runs: &[(f64, Duration)]| {
        runs.iter().map(|r| format!("{:.2}", r.0)).collect::<Vec<_>>().join("/")
    };
    outcome(
        pass,
        format!(
            "{} iterations, mean test PSNR over seeds {SEEDS:?}: full {full:.2} dB [{}], baseline {base:.2} dB [{}], freeze_sc {freeze:.2} dB [{}]; margin over baseline {:.2} >= {BASELINE_MARGIN_DB} dB, over freeze_sc {:.2} > 0; slowest run {slowest:.0?} <= {RUN_BUDGET:?}",
            t.iterations,
            list(&t.full),
            list(&t.baseline),
            list(&t.freeze_sc),
            full - base,
            full - freeze
        ),
    )
}

fn visibility_map(t: &Training) -> Outcome {
    let (_, model) = t.full_model();
    let mut gaps = Vec::new();
    for view in t.dataset.train.iter().filter(|v| !v.occluders.is_empty()) {
        let vm = model.extractor.extract(&view.image).visibility;
        let mask = view.occluder_mask();
        let (mut occ, mut n_occ, mut clean, mut n_clean) = (0.0, 0, 0.0, 0);
        for (v, &m) in vm.iter().zip(&mask) {
            if m {
                occ += v;
                n_occ += 1;
            } else {
                clean += v;
                n_clean += 1;
            }
        }
        if n_occ > 0 && n_clean > 0 {
            gaps.push(clean / n_clean as f64 - occ / n_occ as f64);
        }
    }
    let smallest = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    let average = gaps.iter().sum::<f64>() / gaps.len().max(1) as f64;
    outcome(
        !gaps.is_empty() && smallest >= VM_GAP,
        format!(
            "{} occluded training images, clean minus occluder mean VM: smallest {smallest:.3}, average {average:.3}, required >= {VM_GAP} per image",
            gaps.len()
        ),
    )
}

fn sampling_regularizer(t: &Training) -> Outcome {
    let (cloud, _) = t.full_model();
    let components: Vec<f64> = cloud
        .points
        .iter()
        .flat_map(|p| p.sampling.iter().flat_map(|c| c.iter().copied()))
        .collect();
    let inside = components.iter().filter(|c| c.abs() <= SC_BOUND).count() as f64 / components.len() as f64;
    let loss = l_sc(&cloud);
    outcome(
        inside >= SC_INSIDE_FRACTION && loss < SC_LOSS_LIMIT,
        format!(
            "{:.2}% of {} components within +-{SC_BOUND} (>= {:.0}%), l_sc {loss:.2e} < {SC_LOSS_LIMIT:.0e}",
            100.0 * inside,
            components.len(),
            100.0 * SC_INSIDE_FRACTION
        ),
    )
}

/// Milliseconds per frame reported by the render command.
fn frame_ms(report: &str) -> f64 {
    let at = report.find('(').expect("timing in report") + 1;
    report[at..].split_whitespace().next().unwrap().parse().expect("numeric timing")
}

fn cache_fast_path(t: &Training) -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    // A denser scene than the default dataset provides.
    let dense = dir.path().join("dense");
    let mut c = config(&dense, dir.path(), 1, "n_points = 3000\nn_train = 2\nn_test = 20\n");
    c.seed = DATASET_SEED;
    cmd_generate(&c).expect("dense dataset");
    let scene = dense.join("init_scene.txt");
    let n_points = load_scene(&scene).expect("dense scene").len();
    let reference = ReferenceArgs {
        reference: t.dataset_dir.join(format!("images/train_{:03}.png", t.dataset.reference)),
        reference_camera: Some(dense.join("cameras.txt")),
        reference_index: 0,
    };
    let render_args = |cache: bool, out: &str| RenderArgs {
        model: ModelArgs {
            scene: scene.clone(),
            checkpoint: t.full_run.join(CHECKPOINT_FILE),
            config: None,
        },
        reference: ReferenceArgs { ..reference_clone(&reference) },
        cameras: dense.join("cameras.txt"),
        out: dir.path().join(out),
        weight: 1.0,
        cache,
        transfer: false,
    };
    let mut best = [f64::INFINITY; 2];
    for round in 0..3 {
        for (i, cache) in [false, true].into_iter().enumerate() {
            let report = cmd_render(&render_args(cache, &format!("{cache}_{round}"))).expect("render");
            best[i] = best[i].min(frame_ms(&report));
        }
    }
    let frames = |name: &str| -> Vec<Vec<u8>> {
        let mut paths: Vec<_> = std::fs::read_dir(dir.path().join(name))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        paths.sort();
        paths.iter().map(|p| std::fs::read(p).unwrap()).collect()
    };
    let identical = frames("false_0") == frames("true_0");
    let speedup = best[0] / best[1];
    outcome(
        identical && speedup >= CACHE_SPEEDUP && n_points >= CACHE_MIN_POINTS,
        format!(
            "{n_points} points, {} frames bitwise identical: {identical}, uncached {:.2} ms vs cached {:.2} ms per frame, speedup {speedup:.2}x >= {CACHE_SPEEDUP}x",
            frames("true_0").len(),
            best[0],
            best[1]
        ),
    )
}

fn reference_clone(r: &ReferenceArgs) -> ReferenceArgs {
    ReferenceArgs {
        reference: r.reference.clone(),
        reference_camera: r.reference_camera.clone(),
        reference_index: r.reference_index,
    }
}

fn tuning_sanity(t: &Training) -> Outcome {
    let (cloud, model) = t.full_model();
    let reference_view = t.dataset.reference_view();
    let mut monotone = true;
    let mut sequences = Vec::new();
    for view in &t.dataset.test {
        let frames: Vec<Image> = TUNE_WEIGHTS
            .iter()
            .map(|&w| {
                let reference = Reference {
                    image: &reference_view.image,
                    camera: Some(&reference_view.camera),
                    weight: w,
                    transfer: false,
                };
                render_uncached(&cloud, &model, &reference, Default::default(), &view.camera, [0.0; 3])
                    .expect("render")
            })
            .collect();
        let l1: Vec<f64> = frames.iter().map(|f| f.l1_distance(&frames[0])).collect();
        monotone &= l1.windows(2).all(|p| p[1] >= p[0]);
        sequences.push(
            l1.iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>()
                .join(","),
        );
    }
    outcome(
        monotone && sequences.len() == t.dataset.test.len(),
        format!(
            "L1 to the w=0 frame at w={TUNE_WEIGHTS:?} nondecreasing on all {} test cameras: [{}]",
            sequences.len(),
            sequences.join("] [")
        ),
    )
}

fn loss_formulas() -> Outcome {
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = Image::from_vec(12, 10, (0..360).map(|_| rng.random()).collect()).unwrap();
    let b = Image::from_vec(12, 10, (0..360).map(|_| rng.random()).collect()).unwrap();
    let ones = Array2::from_elem((10, 12), 1.0);
    let point = |sampling: Vec<[f64; 2]>| GaussianPoint {
        position: Vector3::zeros(),
        rotation: [1.0, 0.0, 0.0, 0.0],
        log_scale: Vector3::zeros(),
        opacity_logit: 0.0,
        intrinsic: vec![0.0; SF_DIM],
        sampling,
    };
    let inside = GaussianCloud::new(vec![point(vec![[0.3, -1.0]]), point(vec![[1.0, 0.99]])], 1).unwrap();
    let single = GaussianCloud::new(vec![point(vec![[1.5, -2.0]])], 1).unwrap();
    let checks = [
        ("ssim(I, I) = 1", ssim(&a, &a).unwrap() == 1.0),
        ("ssim symmetric", ssim(&a, &b).unwrap() == ssim(&b, &a).unwrap()),
        ("l_sc inside unit box = 0", l_sc(&inside) == 0.0),
        ("l_sc (1.5, -2.0) = 0.75", l_sc(&single) == 0.75),
        ("l_vm(1) = 0", l_vm(&ones) == 0.0),
        ("l_vm(0.5) = 0.25", l_vm(&Array2::from_elem((10, 12), 0.5)) == 0.25),
        ("image_loss(I, I) = 0", image_loss(&a, &a, &ones, &w).unwrap().total == 0.0),
        (
            "image_loss with VM = 0 is 0",
            image_loss(&a, &b, &Array2::zeros((10, 12)), &w).unwrap().total == 0.0,
        ),
        ("total_loss(0, 0, 0) = 0", total_loss(0.0, 0.0, 0.0, &w) == 0.0),
        ("total_loss(1, 1, 1) = 1.151", (total_loss(1.0, 1.0, 1.0, &w) - 1.151).abs() <= 1e-15),
    ];
    let failing: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failing.is_empty(),
        if failing.is_empty() {
            format!("{} examples hold: {}", checks.len(), checks.map(|c| c.0).join("; "))
        } else {
            format!("failing: {}", failing.join("; "))
        },
    )
}
