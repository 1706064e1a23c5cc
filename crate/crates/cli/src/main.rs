use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use curvesplat_core::coupling::{CoupledScene, CouplingConfig};
use curvesplat_core::evaluation::{evaluate_run, MetricsReport};
use curvesplat_core::io::{self as cio, IoError};
use curvesplat_core::render::render;
use curvesplat_core::scene::{curves_bbox, make_scene, oracle_render, SceneKind, DEFAULT_LINE_WIDTH};
use curvesplat_core::trainer::{self, RunWriter, TrainConfig, TrainError, Trainer};
use curvesplat_core::ParametricCurve;

/// Mask logit for curves read from files, which carry no masks (mask ~ 1).
const FILE_MASK_LOGIT: f64 = 20.0;

#[derive(Parser)]
#[command(name = "curvesplat", version, about = "Reconstruct 3D parametric curves from multi-view edge maps")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long, value_parser = parse_kind)]
        kind: SceneKind,
        #[arg(long, default_value_t = 20)]
        views: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize curves against a dataset.
    Train {
        /// TOML or JSON file with TrainConfig fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint written at this iteration in `out`.
        #[arg(long)]
        resume: Option<u64>,
    },
    /// Render curves into one PNG per camera.
    Render {
        #[arg(long)]
        curves: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Splat)]
        mode: Mode,
        /// Only these camera ids.
        #[arg(long = "view")]
        views: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_LINE_WIDTH)]
        line_width: f64,
    },
    /// Compare predicted curves with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Distance threshold; default 0.01 of the ground-truth bbox diagonal.
        #[arg(long)]
        tau: Option<f64>,
        /// Sampling resolution; default 0.005 of the ground-truth bbox diagonal.
        #[arg(long)]
        resolution: Option<f64>,
        /// Directory for metrics.json and metrics.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Splat,
    Oracle,
}

fn parse_kind(s: &str) -> Result<SceneKind, String> {
    s.parse()
}

/// Failure with the exit code it maps to.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn classify_io(e: IoError) -> Failure {
    if e.is_validation() {
        Failure::Usage(e.into())
    } else {
        Failure::Runtime(e.into())
    }
}

fn classify_train(e: TrainError) -> Failure {
    match e {
        TrainError::Config(_) | TrainError::EmptyDataset | TrainError::ViewSize { .. } | TrainError::DegenerateBounds(_) => {
            Failure::Usage(e.into())
        }
        TrainError::Io(io) => classify_io(io),
        other => Failure::Runtime(other.into()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CURVESPLAT_LOG", "info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Gen {
            kind,
            views,
            size,
            seed,
            out,
        } => cmd_gen(kind, views, size, seed, &out),
        Command::Train {
            config,
            dataset,
            out,
            iterations,
            seed,
            resume,
        } => cmd_train(config.as_deref(), &dataset, &out, iterations, seed, resume),
        Command::Render {
            curves,
            cameras,
            out,
            mode,
            views,
            line_width,
        } => cmd_render(&curves, &cameras, &out, mode, &views, line_width),
        Command::Eval {
            pred,
            gt,
            tau,
            resolution,
            out,
        } => cmd_eval(&pred, &gt, tau, resolution, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn cmd_gen(kind: SceneKind, views: usize, size: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    if views < 2 {
        return Err(usage(anyhow!("--views must be at least 2")));
    }
    if size == 0 {
        return Err(usage(anyhow!("--size must be positive")));
    }
    let scene = make_scene(kind, views, size, seed);
    cio::write_dataset(out, &scene.cameras, &scene.edge_maps, Some(&scene.gt_curves))
        .with_context(|| format!("writing dataset to {}", out.display()))?;
    log::info!("wrote {} views of '{}' to {}", views, kind, out.display());
    Ok(())
}

#[derive(Serialize)]
struct RunManifest {
    config_path: Option<PathBuf>,
    dataset: PathBuf,
    output: PathBuf,
    seed: u64,
    tool_version: &'static str,
    started: String,
    finished: Option<String>,
    resumed_from: Option<u64>,
    config: TrainConfig,
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let parsed = if is_json {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        TrainConfig::from_toml(&text)
    };
    parsed.map_err(|e| usage(anyhow!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_train(
    config_path: Option<&Path>,
    dataset: &Path,
    out: &Path,
    iterations: Option<u64>,
    seed: Option<u64>,
    resume: Option<u64>,
) -> Result<(), Failure> {
    let mut config = load_config(config_path)?;
    if let Some(n) = iterations {
        config.iterations = n;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate().map_err(|e| usage(anyhow!("config: {e}")))?;
    let data = cio::load_dataset(dataset, config.coupling.samples).map_err(classify_io)?;
    let views = data.views();

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = RunManifest {
        config_path: config_path.map(Path::to_path_buf),
        dataset: dataset.to_path_buf(),
        output: out.to_path_buf(),
        seed: config.seed,
        tool_version: env!("CARGO_PKG_VERSION"),
        started: chrono::Utc::now().to_rfc3339(),
        finished: None,
        resumed_from: resume,
        config: config.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;

    let ckpt_dir = out.join("checkpoints");
    let mut trainer = match resume {
        Some(it) => Trainer::resume(config, views, &ckpt_dir, it).map_err(classify_train)?,
        None => Trainer::new(config, views).map_err(classify_train)?,
    };
    let open = |name: &str, append: bool| -> Result<BufWriter<File>, Failure> {
        let path = out.join(name);
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        Ok(BufWriter::new(file))
    };
    let appending = resume.is_some();
    let log = open("loss.csv", appending)?;
    let events = open("events.jsonl", appending)?;
    let mut writer = RunWriter::new(log, events, ckpt_dir, !appending)?;
    let output = trainer::run(&mut trainer, &mut writer).map_err(classify_train)?;
    drop(writer);

    let final_path = out.join("final_curves.json");
    cio::write_curves(&final_path, &output.curves.curves)?;
    log::info!(
        "{} curves written to {}",
        output.curves.len(),
        final_path.display()
    );
    manifest.finished = Some(chrono::Utc::now().to_rfc3339());
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(())
}

fn read_curves_for_render(path: &Path) -> Result<Vec<ParametricCurve>, Failure> {
    let samples = CouplingConfig::default().samples;
    let curves = cio::read_curves(path, samples).map_err(classify_io)?;
    Ok(curves
        .into_iter()
        .map(|c| c.with_mask_logits(FILE_MASK_LOGIT))
        .collect())
}

fn cmd_render(
    curves_path: &Path,
    cameras_path: &Path,
    out: &Path,
    mode: Mode,
    only: &[usize],
    line_width: f64,
) -> Result<(), Failure> {
    if !(line_width >= 1.0) {
        return Err(usage(anyhow!("--line-width must be at least 1")));
    }
    let curves = read_curves_for_render(curves_path)?;
    let cameras = cio::read_cameras(cameras_path).map_err(classify_io)?;
    for id in only {
        if !cameras.iter().any(|c| c.id == *id) {
            return Err(usage(anyhow!("camera id {id} not found in {}", cameras_path.display())));
        }
    }
    let selected: Vec<_> = cameras
        .iter()
        .filter(|c| only.is_empty() || only.contains(&c.id))
        .collect();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let coupling = CouplingConfig::default();
    let scene = CoupledScene::build(&curves, &coupling);
    for cam in selected {
        let image = match mode {
            Mode::Oracle => oracle_render(&curves, cam, line_width),
            Mode::Splat => render(&scene.gaussians, cam)?.image,
        };
        image.save_png(&out.join(format!("{}.png", cam.id)))?;
    }
    Ok(())
}

fn cmd_eval(
    pred: &Path,
    gt: &Path,
    tau: Option<f64>,
    resolution: Option<f64>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let samples = CouplingConfig::default().samples;
    let pred_curves = cio::read_curves(pred, samples).map_err(classify_io)?;
    let gt_curves = cio::read_curves(gt, samples).map_err(classify_io)?;
    let diag = curves_bbox(&gt_curves)
        .map(|b| b.diagonal())
        .filter(|d| *d > 0.0)
        .ok_or_else(|| usage(anyhow!("{}: ground truth has no extent", gt.display())))?;
    let tau = tau.unwrap_or(0.01 * diag);
    let resolution = resolution.unwrap_or(0.005 * diag);
    if !(tau >= 0.0) {
        return Err(usage(anyhow!("--tau must be nonnegative")));
    }
    let report: MetricsReport = evaluate_run(&pred_curves, &gt_curves, tau, resolution).map_err(usage)?;
    println!("{}", MetricsReport::CSV_HEADER);
    println!("{}", report.csv_row());
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(&dir.join("metrics.json"), &report)?;
        let csv = dir.join("metrics.csv");
        let file = File::create(&csv).with_context(|| format!("writing {}", csv.display()))?;
        report.write_csv(BufWriter::new(file))?;
    }
    Ok(())
}
