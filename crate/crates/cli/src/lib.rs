//! Command-line front end: dataset generation, training, rendering,
//! evaluation and appearance-weight sweeps.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use gsw::appearance::checkpoint::{load_checkpoint, save_checkpoint};
use gsw::appearance::{AppearanceModel, AppearanceOptions};
use gsw::camera::Camera;
use gsw::dataio::{
    generate_dataset, load_cameras, load_dataset, load_scene, read_image, save_dataset, save_scene,
    write_image, Metrics,
};
use gsw::frame::Image;
use gsw::optim::{evaluate, train};
use gsw::pipeline::{reference_appearance, render_cached, render_uncached, Reference};
use gsw::scene::GaussianCloud;

pub use config::RunConfig;

pub const SCENE_FILE: &str = "scene.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const LOG_FILE: &str = "train.log";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] gsw::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "gsw", version, about = "Gaussian splatting with in-the-wild appearance")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural perturbed dataset to the `dataset` directory.
    Generate(GenerateArgs),
    /// Train on the `dataset` directory; writes scene, checkpoint and log to `output`.
    Train(TrainArgs),
    /// Render novel cameras with the appearance of a reference image.
    Render(RenderArgs),
    /// Score every test view against the dataset's clean reference image.
    Eval(EvalArgs),
    /// Render one camera at a sequence of appearance weights.
    Tune(TuneArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// The trained model, plus an optional config for ablation flags and the
/// background color.
#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReferenceArgs {
    /// Image providing the dynamic appearance.
    #[arg(long)]
    pub reference: PathBuf,
    /// Camera file holding the reference pose.
    #[arg(long)]
    pub reference_camera: Option<PathBuf>,
    /// Row of `--reference-camera` to use.
    #[arg(long, default_value_t = 0)]
    pub reference_index: usize,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub reference: ReferenceArgs,
    /// Camera file with one novel view per row.
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub weight: f64,
    /// Compute appearance features once instead of per frame.
    #[arg(long)]
    pub cache: bool,
    /// Unposed reference: zero the projection feature map.
    #[arg(long)]
    pub transfer: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Overrides the config's `dataset` key.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub reference: ReferenceArgs,
    /// Camera file holding the rendered view.
    #[arg(long)]
    pub camera: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub camera_index: usize,
    /// Comma-separated weights; defaults to the config's `tune_weights`.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(report) => {
            print!("{report}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs one command and returns its human-readable report.
pub fn run(command: Command) -> Result<String> {
    match command {
        Command::Generate(a) => cmd_generate(&with_seed(RunConfig::load(&a.config)?, a.seed)),
        Command::Train(a) => cmd_train(&with_seed(RunConfig::load(&a.config)?, a.seed)),
        Command::Render(a) => cmd_render(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Tune(a) => cmd_tune(&a),
    }
}

fn with_seed(mut config: RunConfig, seed: Option<u64>) -> RunConfig {
    if let Some(s) = seed {
        config.seed = s;
    }
    config
}

pub fn cmd_generate(config: &RunConfig) -> Result<String> {
    let dir = config.dataset_path()?;
    let generated = generate_dataset(&config.synthetic_spec(), config.seed)?;
    save_dataset(&generated.dataset, dir)?;
    save_scene(&generated.ground_truth.cloud, &dir.join("ground_truth_scene.txt"))?;
    Ok(format!(
        "wrote {} train and {} test views to {}\n",
        generated.dataset.train.len(),
        generated.dataset.test.len(),
        dir.display()
    ))
}

pub fn cmd_train(config: &RunConfig) -> Result<String> {
    let dataset = load_dataset(config.dataset_path()?)?;
    let train_config = config.train_config();
    let mut log = String::from("# iteration loss psnr_train psnr_test points\n");
    let output = train(&dataset, &train_config, |line| {
        let _ = writeln!(log, "{line}");
    })?;
    let dir = &config.output;
    create_dir(dir)?;
    save_scene(&output.cloud, &dir.join(SCENE_FILE))?;
    save_checkpoint(&output.model, &dir.join(CHECKPOINT_FILE))?;
    write_text(&dir.join(LOG_FILE), &log)?;
    Ok(log)
}

struct LoadedModel {
    cloud: GaussianCloud,
    model: AppearanceModel,
    config: RunConfig,
}

impl LoadedModel {
    fn load(args: &ModelArgs) -> Result<Self> {
        let config = match &args.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let cloud = load_scene(&args.scene)?;
        let model = load_checkpoint(&args.checkpoint)?;
        if model.k() != cloud.k {
            return Err(CliError::Usage(format!(
                "scene has K = {} sampling maps but the checkpoint expects {}",
                cloud.k,
                model.k()
            )));
        }
        Ok(Self { cloud, model, config })
    }

    fn options(&self) -> AppearanceOptions {
        self.config.ablation().appearance_options()
    }
}

fn camera_at(path: &Path, index: usize) -> Result<Camera> {
    let cameras = load_cameras(path)?;
    let n = cameras.len();
    cameras
        .into_iter()
        .nth(index)
        .ok_or_else(|| CliError::Usage(format!("camera index {index} out of range for {} ({n} cameras)", path.display())))
}

/// The reference image and, unless `transfer`, its required pose.
fn load_reference(args: &ReferenceArgs, transfer: bool) -> Result<(Image, Option<Camera>)> {
    let camera = match (&args.reference_camera, transfer) {
        (Some(path), _) => Some(camera_at(path, args.reference_index)?),
        (None, true) => None,
        (None, false) => {
            return Err(CliError::Usage(
                "`--reference-camera` is required unless `--transfer` is given".into(),
            ))
        }
    };
    Ok((read_image(&args.reference)?, camera))
}

pub fn cmd_render(args: &RenderArgs) -> Result<String> {
    let loaded = LoadedModel::load(&args.model)?;
    let transfer = args.transfer || loaded.config.transfer;
    let (image, camera) = load_reference(&args.reference, transfer)?;
    let reference = Reference {
        image: &image,
        camera: camera.as_ref(),
        weight: args.weight,
        transfer,
    };
    let cameras = load_cameras(&args.cameras)?;
    create_dir(&args.out)?;
    let (cloud, model, options) = (&loaded.cloud, &loaded.model, loaded.options());
    let background = loaded.config.background;
    let start = Instant::now();
    let cached = if args.cache {
        Some(reference_appearance(cloud, model, &reference, options)?)
    } else {
        None
    };
    for (i, cam) in cameras.iter().enumerate() {
        let frame = match &cached {
            Some(af) => render_cached(cloud, model, af, cam, background)?,
            None => render_uncached(cloud, model, &reference, options, cam, background)?,
        };
        write_image(&frame, &args.out.join(format!("render_{i:03}.png")))?;
    }
    let per_frame = start.elapsed().as_secs_f64() * 1e3 / cameras.len().max(1) as f64;
    Ok(format!(
        "rendered {} frames to {} ({per_frame:.2} ms per frame{})\n",
        cameras.len(),
        args.out.display(),
        if args.cache { ", cached" } else { "" }
    ))
}

/// One row per test view followed by a `mean` row.
pub fn metrics_table(metrics: &[Metrics]) -> String {
    let mut out = String::from("view psnr ssim\n");
    for (i, m) in metrics.iter().enumerate() {
        let _ = writeln!(out, "{i} {:.4} {:.6}", m.psnr, m.ssim);
    }
    let n = metrics.len() as f64;
    let psnr = metrics.iter().map(|m| m.psnr).sum::<f64>() / n;
    let ssim = metrics.iter().map(|m| m.ssim).sum::<f64>() / n;
    let _ = writeln!(out, "mean {psnr:.4} {ssim:.6}");
    out
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let loaded = LoadedModel::load(&args.model)?;
    let dir = match &args.dataset {
        Some(d) => d.as_path(),
        None => loaded.config.dataset_path()?,
    };
    let dataset = load_dataset(dir)?;
    if dataset.test.is_empty() {
        return Err(CliError::Usage(format!("dataset {} has no test views", dir.display())));
    }
    let metrics = evaluate(&loaded.cloud, &loaded.model, &dataset, loaded.options(), loaded.config.background)?;
    Ok(metrics_table(&metrics))
}

/// File name for a tuning frame, e.g. `tune_w0.250.png`.
pub fn tune_file_name(weight: f64) -> String {
    format!("tune_w{weight:.3}.png")
}

pub fn cmd_tune(args: &TuneArgs) -> Result<String> {
    let loaded = LoadedModel::load(&args.model)?;
    let (image, ref_camera) = load_reference(&args.reference, false)?;
    let camera = camera_at(&args.camera, args.camera_index)?;
    let weights = args.weights.clone().unwrap_or_else(|| loaded.config.tune_weights.clone());
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(CliError::Usage("tuning weights must be finite".into()));
    }
    create_dir(&args.out)?;
    let mut report = String::new();
    for w in weights {
        let reference = Reference {
            image: &image,
            camera: ref_camera.as_ref(),
            weight: w,
            transfer: false,
        };
        let frame = render_uncached(
            &loaded.cloud,
            &loaded.model,
            &reference,
            loaded.options(),
            &camera,
            loaded.config.background,
        )?;
        let path = args.out.join(tune_file_name(w));
        write_image(&frame, &path)?;
        let _ = writeln!(report, "{}", path.display());
    }
    Ok(report)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| {
        CliError::Runtime(gsw::Error::Io {
            path: dir.to_path_buf(),
            source,
        })
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| {
        CliError::Runtime(gsw::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}
