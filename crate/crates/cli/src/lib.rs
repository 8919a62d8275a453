//! `palgan` command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use palgan_core::checkpoint::Checkpoint;
use palgan_core::colorspace::{lab_to_srgb_pixel, rgb_to_gray, rgb_to_lab};
use palgan_core::data::{build_index, synth, CachePolicy, Split};
use palgan_core::metrics::{self, EvalConfig};
use palgan_core::model::Model;
use palgan_core::nn::ParameterSet;
use palgan_core::palette::{soft_histogram, PaletteFile, PaletteGrid, PaletteHistogram};
use palgan_core::training::{TrainConfig, Trainer};
use palgan_core::{Error, RgbImage};

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "PALGAN_NUM_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NON_FINITE: i32 = 2;

/// Side of one palette cell in the heatmap PNG.
pub const HEATMAP_CELL: u32 = 16;

#[derive(Debug, Parser)]
#[command(name = "palgan", version, about = "Palette-guided image colorization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train encoder, generator and discriminator on an image folder.
    Train(TrainArgs),
    /// Colorize gray (or color, L-stripped) images with predicted palettes.
    Colorize(ColorizeArgs),
    /// Colorize one image with the palette of a reference image or palette file.
    ColorizeRef(ColorizeRefArgs),
    /// Extract the palette of a color image as JSON plus a heatmap PNG.
    Palette(PaletteArgs),
    /// Score automatic colorization on a validation folder.
    Eval(EvalArgs),
    /// Write a procedural image corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training image folder.
    #[arg(long)]
    pub data: PathBuf,
    /// Output folder for checkpoints and the CSV log.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint (its stored config is used).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single-threaded, bit-reproducible data loading.
    #[arg(long)]
    pub deterministic: bool,
    /// Override the total palette bins (a perfect square).
    #[arg(long)]
    pub bins: Option<usize>,
    /// Override the training crop size.
    #[arg(long)]
    pub crop: Option<usize>,
    /// Override the number of epochs.
    #[arg(long)]
    pub epochs: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ColorizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output folder.
    #[arg(long)]
    pub out: PathBuf,
    /// Outputs per input, each from its own latent code.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Input images.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ColorizeRefArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Color image or palette JSON.
    #[arg(long)]
    pub reference: PathBuf,
    /// Output folder.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct PaletteArgs {
    /// Output folder.
    #[arg(long)]
    pub out: PathBuf,
    /// Total bins (a perfect square).
    #[arg(long, default_value_t = 256)]
    pub bins: usize,
    /// Kernel width of the soft assignment.
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    pub image: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Validation image folder.
    #[arg(long)]
    pub data: PathBuf,
    /// Output folder for `eval.csv` and `eval.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluation side length.
    #[arg(long, default_value_t = 64)]
    pub crop: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Score images one at a time.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// 2 for a numerical abort anywhere in the chain, else 1.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    let non_finite = e
        .chain()
        .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::NonFinite { .. })));
    if non_finite {
        EXIT_NON_FINITE
    } else {
        EXIT_ERROR
    }
}

/// Sizes the global rayon pool from `PALGAN_NUM_THREADS`, once per process.
pub fn init_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    init_threads();
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Colorize(a) => cmd_colorize(&a),
        Command::ColorizeRef(a) => cmd_colorize_ref(&a),
        Command::Palette(a) => cmd_palette(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Synth(a) => {
            let files = synth::write_corpus(&a.out, a.count, a.size, a.seed)?;
            info!("wrote {} images to {}", files.len(), a.out.display());
            Ok(())
        }
    }
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.deterministic {
        cfg.deterministic = true;
    }
    if let Some(b) = a.bins {
        cfg.bins = Some(b);
    }
    if let Some(c) = a.crop {
        cfg.crop_size = c;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let data = build_index(&a.data, Split::Train)
        .with_context(|| format!("indexing training data at {}", a.data.display()))?
        .with_cache(CachePolicy::Memory);
    for w in data.warnings() {
        log::warn!("{w}");
    }
    let mut trainer = match &a.resume {
        Some(path) => {
            if a.config.is_some() || a.bins.is_some() || a.crop.is_some() {
                bail!("--resume uses the checkpoint's config; drop --config, --bins and --crop");
            }
            let t = Trainer::load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            info!("resuming at step {} of {}", t.state.step, t.state.total_steps);
            t
        }
        None => {
            let cfg = train_config(a)?;
            let spe = data.batches(cfg.batch_size, cfg.seed, 0).len() as u64;
            Trainer::new(cfg, spe)?
        }
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("config.toml"), trainer.config.to_toml())
        .with_context(|| format!("writing config into {}", a.out.display()))?;
    let interval = trainer.config.log_interval.max(1);
    trainer.fit(&data, Some(&a.out), |r| {
        if r.step % interval == 0 {
            info!(
                "step {} tau {:.3} d {:.4} rg {:.4} hist {:.4} adv {:.4} pal {:.4}",
                r.step, r.tau, r.d_loss, r.regression, r.histogram, r.adversarial, r.palette_total
            );
        }
    })?;
    info!("finished at step {}", trainer.state.step);
    Ok(())
}

/// Model and parameters stored in a checkpoint.
pub fn load_model(path: &Path) -> Result<(Model, ParameterSet)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = Model::new(ck.meta.model)?;
    metrics::check_params(&model, &ck.params)?;
    Ok((model, ck.params))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

pub fn cmd_colorize(a: &ColorizeArgs) -> Result<()> {
    if a.samples == 0 {
        bail!("--samples must be at least 1");
    }
    let (model, params) = load_model(&a.checkpoint)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (i, input) in a.inputs.iter().enumerate() {
        let gray = rgb_to_gray(&RgbImage::load(input)?)?;
        let mut rng = metrics::image_rng(a.seed, i);
        for k in 0..a.samples {
            let z = model.latent(&mut rng);
            let out = model.colorize(&gray, None, &z, &params)?;
            let name = if a.samples == 1 {
                format!("{}_color.png", stem(input))
            } else {
                format!("{}_color_{k}.png", stem(input))
            };
            out.rgb.save_png(&a.out.join(name))?;
        }
    }
    Ok(())
}

/// Palette of a reference: a palette JSON, or the soft histogram of a color image.
pub fn reference_palette(path: &Path, grid: &PaletteGrid) -> Result<PaletteHistogram> {
    let is_json = path.extension().and_then(|e| e.to_str()) == Some("json");
    let hist = if is_json {
        PaletteFile::load(path)?.histogram()?
    } else {
        let (_, chroma) = rgb_to_lab(&RgbImage::load(path)?)?;
        soft_histogram(&chroma, grid)?
    };
    hist.check_grid(grid)
        .with_context(|| format!("reference palette {}", path.display()))?;
    Ok(hist)
}

pub fn cmd_colorize_ref(a: &ColorizeRefArgs) -> Result<()> {
    let (model, params) = load_model(&a.checkpoint)?;
    let palette = reference_palette(&a.reference, &model.config.grid)?;
    let gray = rgb_to_gray(&RgbImage::load(&a.input)?)?;
    let z = model.latent(&mut ChaCha8Rng::seed_from_u64(a.seed));
    let out = model.colorize(&gray, Some(&palette), &z, &params)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    out.rgb.save_png(&a.out.join(format!("{}_ref.png", stem(&a.input))))?;
    Ok(())
}

/// `n_a x n_b` cells, each drawn in its bin-center color at a fixed lightness,
/// dimmed by the square root of its weight relative to the largest.
pub fn render_heatmap(hist: &PaletteHistogram, cell: u32) -> image::RgbImage {
    let grid = PaletteGrid::new(hist.n_a(), hist.n_b(), 1.0).expect("histogram grid is valid");
    let (ca, cb) = (grid.centers_a(), grid.centers_b());
    let max = hist.weights().iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    image::RgbImage::from_fn(hist.n_b() as u32 * cell, hist.n_a() as u32 * cell, |x, y| {
        let (ia, ib) = ((y / cell) as usize, (x / cell) as usize);
        let (rgb, _) = lab_to_srgb_pixel(0.7, ca[ia], cb[ib]);
        let s = (hist.get(ia, ib) / max).sqrt();
        image::Rgb(rgb.map(|c| (c * s * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

pub fn cmd_palette(a: &PaletteArgs) -> Result<()> {
    let img = image::open(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    if !img.color().has_color() {
        bail!("{} is a gray image; a palette needs chroma", a.image.display());
    }
    let grid = PaletteGrid::square(a.bins, a.sigma)?;
    let (_, chroma) = rgb_to_lab(&RgbImage::from_dynamic(&img)?)?;
    let hist = soft_histogram(&chroma, &grid)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let s = stem(&a.image);
    PaletteFile::new(&hist, a.sigma).save(&a.out.join(format!("{s}.palette.json")))?;
    let png = a.out.join(format!("{s}.palette.png"));
    render_heatmap(&hist, HEATMAP_CELL)
        .save(&png)
        .with_context(|| format!("writing {}", png.display()))?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (model, params) = load_model(&a.checkpoint)?;
    let data = build_index(&a.data, Split::Val)
        .with_context(|| format!("indexing evaluation data at {}", a.data.display()))?;
    let cfg = EvalConfig {
        size: a.crop,
        seed: a.seed,
    };
    let report = if a.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()?
            .install(|| metrics::evaluate(&model, &params, &data, &cfg))?
    } else {
        metrics::evaluate(&model, &params, &data, &cfg)?
    };
    report.save(&a.out, "eval")?;
    let s = &report.summary;
    info!(
        "{} images: PSNR {:.3} dB ({} exact), SSIM {:.4}, palette L1 {:.4}, entropy {:.4}",
        s.images, s.mean_psnr, s.infinite_psnr, s.mean_ssim, s.mean_palette_l1, s.mean_palette_entropy
    );
    Ok(())
}
