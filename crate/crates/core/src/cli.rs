//! Command-line front end.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::attack::{run_attack, Strategy};
use crate::config::{parse_config, RunConfig};
use crate::encoder::VisionEncoder;
use crate::error::{Error, Result};
use crate::gradcheck::{pipeline_gradcheck, DEFAULT_STEP, PIPELINE_TOLERANCE};
use crate::guidance::{PixelMask, PixelWeightMap};
use crate::harness::{bench_iteration_time, render_scene, Surrogate};
use crate::io::{ImageFile, PerturbationRecord};
use crate::par::{with_threads, Parallelism};
use crate::tensor::Tensor;

/// Per-iteration time quoted for the original full-scale setting; printed
/// next to bench results for orientation only.
pub const REFERENCE_ITER_SECONDS: f64 = 0.06;

pub const ADVERSARIAL_FILE: &str = "adversarial.ppm";
pub const RECORD_FILE: &str = "perturbation.bin";
pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Parser)]
#[command(name = "advla", version, about = "Feature-space PGD attacks on a patch-transformer encoder")]
pub struct Cli {
    /// Worker threads for parallel episodes (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare the input gradient of the feature loss with finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        pixels: usize,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        /// Write per-pixel results as CSV into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attack one PPM image.
    Attack {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the surrogate task under every configured condition.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override `harness.trials`.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Time repeated attacks on a rendered scene.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render diagnostic images from an attack output directory.
    Visualize {
        #[arg(long)]
        result: PathBuf,
        #[arg(long, default_value_t = 8.0)]
        amp: f64,
    },
}

fn load(config: Option<&Path>) -> Result<RunConfig> {
    match config {
        Some(p) => parse_config(p),
        None => Ok(RunConfig::default()),
    }
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::config("output_dir", "pass --out or set output_dir"))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_gradcheck(cfg: &RunConfig, pixels: usize, step: f64, out: Option<PathBuf>) -> Result<()> {
    let enc = VisionEncoder::new(cfg.encoder.clone())?;
    let report = pipeline_gradcheck(&enc, pixels, step, cfg.seed)?;
    if let Some(dir) = out {
        fs::create_dir_all(&dir)?;
        report.write_csv(create(&dir.join("gradcheck.csv"))?)?;
    }
    let worst = report.max_rel_err();
    println!("pixels={} step={} max_rel_err={:e} tolerance={:e}", report.checks.len(), step, worst, PIPELINE_TOLERANCE);
    if report.passed(PIPELINE_TOLERANCE) {
        Ok(())
    } else {
        Err(Error::CheckFailed(format!(
            "gradient max relative error {worst:e} exceeds {PIPELINE_TOLERANCE:e}"
        )))
    }
}

fn cmd_attack(cfg: &RunConfig, image: &Path, out: Option<PathBuf>) -> Result<()> {
    let dir = out_dir(out, cfg)?;
    let file = ImageFile::read_ppm(File::open(image)?)?;
    let [_, h, w] = cfg.encoder.image_shape();
    if file.width != w || file.height != h {
        return Err(Error::config(
            "encoder.image_h",
            format!("image is {}x{} but the encoder expects {w}x{h}", file.width, file.height),
        ));
    }
    let clean: Tensor = file.to_tensor();
    let enc = VisionEncoder::new(cfg.encoder.clone())?;
    let result = run_attack(&enc, &clean, &cfg.attack)?;
    ImageFile::from_tensor(&result.adversarial)?.write_ppm(create(&dir.join(ADVERSARIAL_FILE))?)?;
    result
        .record(&clean, cfg.encoder.patch_size)
        .write(create(&dir.join(RECORD_FILE))?)?;
    result.write_trace_csv(create(&dir.join(TRACE_FILE))?, cfg.harness.record_timing)?;
    println!(
        "strategy={} loss {:.6} -> {:.6} max|delta|={:.6} patches={:.4}",
        result.strategy.name(),
        result.initial_loss(),
        result.final_loss(),
        result.max_abs_perturbation,
        result.modified_patch_fraction
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: Option<PathBuf>, trials: Option<usize>, mode: Parallelism) -> Result<()> {
    let dir = out_dir(out, cfg)?;
    let surrogate = Surrogate::from_run_config(cfg)?;
    let trials = trials.unwrap_or(cfg.harness.trials);
    let table = surrogate.evaluate_suite(&surrogate.default_grid(), trials, mode)?;
    let timing = cfg.harness.record_timing;
    table.write_csv(create(&dir.join(METRICS_FILE))?, timing)?;
    table.write_csv(std::io::stdout().lock(), timing)?;
    for line in table.monotonicity_violations() {
        eprintln!("warning: {line}");
    }
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, repeats: usize, out: Option<PathBuf>) -> Result<()> {
    let enc = VisionEncoder::new(cfg.encoder.clone())?;
    let scene = cfg.harness.scene.sample(cfg.seed, cfg.harness.scene.min_start_distance);
    let image = render_scene(&scene, &cfg.encoder)?;
    let report = bench_iteration_time(&enc, &image, &cfg.attack, repeats)?;
    match out {
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            report.write_csv(create(&dir.join("bench.csv"))?)?;
        }
        None => report.write_csv(std::io::stdout().lock())?,
    }
    eprintln!(
        "per-iteration seconds: mean {:.6} median {:.6} stddev {:.6} (reference figure {REFERENCE_ITER_SECONDS} s on different hardware and model size)",
        report.mean(),
        report.median(),
        report.stddev()
    );
    Ok(())
}

fn write_rgb(path: &Path, image: &Tensor) -> Result<()> {
    ImageFile::from_tensor(image)?.write_ppm(create(path)?)
}

/// `0.5 + amp * delta`, clamped to `[0, 1]`.
pub fn amplified_perturbation(delta: &Tensor, amp: f64) -> Tensor {
    delta.map(|d| (0.5 + amp * d).clamp(0.0, 1.0))
}

/// Weight map scaled to its maximum, blended half-and-half with the image.
pub fn attention_overlay(clean: &Tensor, weights: &PixelWeightMap) -> Tensor {
    let max = weights.values.max_abs();
    let hw = weights.values.numel();
    let w = weights.values.data();
    Tensor::from_fn(clean.shape(), |i| {
        let heat = if max > 0.0 { w[i % hw] / max } else { 0.0 };
        0.5 * heat + 0.5 * clean.data()[i]
    })
}

/// Selected pixels blended half-and-half with yellow; others unchanged.
pub fn mask_overlay(clean: &Tensor, mask: &PixelMask) -> Tensor {
    const TINT: [f64; 3] = [1.0, 1.0, 0.0];
    let hw = mask.bits.numel();
    let m = mask.bits.data();
    Tensor::from_fn(clean.shape(), |i| {
        let c = clean.data()[i];
        if m[i % hw] > 0.0 {
            0.5 * c + 0.5 * TINT[i / hw]
        } else {
            c
        }
    })
}

fn cmd_visualize(result: &Path, amp: f64) -> Result<()> {
    if !amp.is_finite() {
        return Err(Error::config("amp", "must be finite"));
    }
    let rec = PerturbationRecord::read(File::open(result.join(RECORD_FILE))?)?;
    let weights = PixelWeightMap {
        values: rec.weight_map.clone(),
    };
    let mask = PixelMask {
        bits: rec.pixel_mask.clone(),
    };
    write_rgb(&result.join("perturbation_amp.ppm"), &amplified_perturbation(&rec.perturbation, amp))?;
    write_rgb(&result.join("attention_overlay.ppm"), &attention_overlay(&rec.clean, &weights))?;
    write_rgb(&result.join("mask_overlay.ppm"), &mask_overlay(&rec.clean, &mask))?;
    weights.write_pgm(create(&result.join("attention.pgm"))?)?;
    mask.write_pbm(create(&result.join("mask.pbm"))?)?;
    let strategy = Strategy::from_code(rec.strategy_code).map_or("unknown", Strategy::name);
    println!("strategy={strategy} amp={amp} wrote 5 images to {}", result.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let mode = if cli.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    };
    with_threads(cli.threads, move || match cli.command {
        Command::Gradcheck {
            config,
            pixels,
            step,
            out,
        } => cmd_gradcheck(&load(config.as_deref())?, pixels, step, out),
        Command::Attack { config, image, out } => cmd_attack(&load(config.as_deref())?, &image, out),
        Command::Eval { config, out, trials } => cmd_eval(&load(config.as_deref())?, out, trials, mode),
        Command::Bench { config, repeats, out } => cmd_bench(&load(config.as_deref())?, repeats, out),
        Command::Visualize { result, amp } => cmd_visualize(&result, amp),
    })
}

/// Exit status for an error: 1 for bad input or configuration, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        1
    } else {
        2
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
