use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use scenefit::io::{
    confusion_rows, read_csv, read_versioned, write_csv, write_json, FitsFile, MetricRow, RefitFile,
};
use scenefit::pipeline::{self, GenerateOptions};
use scenefit_core::refit::RefitConfig;
use scenefit_core::synth::PlacementConfig;
use scenefit_core::Intrinsics;

#[derive(Parser)]
#[command(
    name = "scenefit",
    version,
    about = "Multi-person body fitting in camera space"
)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Body model JSON; the built-in humanoid when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Attribute anchor catalog JSON.
    #[arg(long)]
    anchors: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample synthetic scenes with simulated cues and initial states.
    Generate {
        #[arg(long)]
        n_scenes: usize,
        #[arg(long, default_value_t = 1)]
        persons_min: usize,
        #[arg(long, default_value_t = 4)]
        persons_max: usize,
        /// Noise JSON, or preset=zero / preset=noisy.
        #[arg(long)]
        noise: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Leave ground truth out of the scene file.
        #[arg(long)]
        no_gt: bool,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Fit every scene of a scene file.
    Fit {
        #[arg(long)]
        scenes: PathBuf,
        /// Fit config JSON, or profile=multihmr_like / profile=camerahmr_like.
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration loss terms as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jobs: Option<usize>,
        /// Early-stop tolerance on the relative loss change.
        #[arg(long)]
        tol: Option<f64>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Score fits (or the initial states) against ground truth.
    Eval {
        #[arg(long)]
        scenes: PathBuf,
        /// Fits to score; the scene file's initial states when omitted.
        #[arg(long)]
        fits: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        confusion: Option<PathBuf>,
        /// Row label in the metrics table.
        #[arg(long)]
        label: Option<String>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Convert meshes into model parameters.
    Refit {
        #[arg(long)]
        meshes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        iterations: usize,
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Compare analytic and finite-difference gradients on a random scene.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        persons: usize,
        #[arg(long)]
        config: Option<String>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Combine init and fitted metrics into a comparison table.
    Report {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        fitted: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss-trace CSV written by fit, pivoted for plotting.
        #[arg(long, requires = "trace_out")]
        trace: Option<PathBuf>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Keep the fits whose mean reprojection error lies between two percentiles.
    Export {
        #[arg(long)]
        fits: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        lo: f64,
        #[arg(long, default_value_t = 95.0)]
        hi: f64,
    },
    /// Write the built-in body model as JSON.
    ExportModel {
        #[arg(long)]
        out: PathBuf,
    },
}

fn single_row(path: &Path) -> Result<MetricRow> {
    let rows: Vec<MetricRow> = read_csv(path)?;
    rows.into_iter()
        .next()
        .with_context(|| format!("{}: no metric rows", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate {
            n_scenes,
            persons_min,
            persons_max,
            noise,
            seed,
            out,
            no_gt,
            model,
        } => {
            let m = pipeline::load_model(model.model.as_deref())?;
            let catalog = pipeline::load_catalog(model.anchors.as_deref())?;
            let opts = GenerateOptions {
                n_scenes,
                persons_min,
                persons_max,
                seed,
                with_gt: !no_gt,
                camera: Intrinsics::default(),
                placement: PlacementConfig::default(),
                noise: pipeline::load_noise(noise.as_deref(), &catalog)?,
            };
            let scenes = pipeline::generate(&m, &catalog, &opts)?;
            write_json(&out, &scenes)?;
            log::info!("wrote {} scenes to {}", n_scenes, out.display());
        }
        Command::Fit {
            scenes,
            config,
            out,
            trace,
            seed,
            jobs,
            tol,
            model,
        } => {
            let m = pipeline::load_model(model.model.as_deref())?;
            let file = pipeline::read_scenes(&scenes, &m)?;
            let mut cfg = pipeline::load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if tol.is_some() {
                cfg.tol = tol;
            }
            cfg.validate()?;
            let fitted = pipeline::fit_all(&m, &file, &cfg, jobs)?;
            write_json(&out, &fitted.fits)?;
            if let Some(t) = trace {
                let ids: Vec<u64> = file.scenes.iter().map(|s| s.id).collect();
                write_csv(&t, &pipeline::trace_rows(&ids, &fitted.results))?;
            }
            log::info!("fitted {} scenes", file.scenes.len());
        }
        Command::Eval {
            scenes,
            fits,
            out,
            confusion,
            label,
            model,
        } => {
            let m = pipeline::load_model(model.model.as_deref())?;
            let catalog = pipeline::load_catalog(model.anchors.as_deref())?;
            let file = pipeline::read_scenes(&scenes, &m)?;
            let fits: Option<FitsFile> = fits.as_deref().map(read_versioned).transpose()?;
            let (_, report) = pipeline::evaluate(&m, &catalog, &file, fits.as_ref())?;
            let label =
                label.unwrap_or_else(|| if fits.is_some() { "fitted" } else { "init" }.into());
            write_csv(&out, &[MetricRow::from_report(&label, &report)])?;
            if let Some(c) = confusion {
                let mut rows = confusion_rows("age", &report.age_confusion);
                rows.extend(confusion_rows("gender", &report.gender_confusion));
                write_csv(&c, &rows)?;
            }
        }
        Command::Refit {
            meshes,
            out,
            iterations,
            jobs,
            model,
        } => {
            let m = pipeline::load_model(model.model.as_deref())?;
            let sources = pipeline::read_meshes(&meshes)?;
            let config = RefitConfig {
                iterations,
                ..RefitConfig::default()
            };
            let file: RefitFile = pipeline::refit_all(&m, &sources, &config, jobs)?;
            let failed = file.fits.iter().filter(|f| f.error.is_some()).count();
            write_json(&out, &file)?;
            if failed > 0 {
                log::warn!("{failed} of {} meshes failed", file.fits.len());
            }
        }
        Command::Gradcheck {
            seed,
            persons,
            config,
            model,
        } => {
            let m = pipeline::load_model(model.model.as_deref())?;
            let catalog = pipeline::load_catalog(model.anchors.as_deref())?;
            let cfg = pipeline::load_config(config.as_deref())?;
            let check = pipeline::gradcheck(&m, &catalog, &cfg, persons, seed)?;
            println!("{}", serde_json::to_string_pretty(&check)?);
            if !check.passed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report {
            init,
            fitted,
            out,
            trace,
            trace_out,
        } => {
            let rows = pipeline::compare(&single_row(&init)?, &single_row(&fitted)?);
            write_csv(&out, &rows)?;
            if let (Some(t), Some(o)) = (trace, trace_out) {
                write_csv(&o, &pipeline::trace_table(&read_csv(&t)?))?;
            }
        }
        Command::Export { fits, out, lo, hi } => {
            let f: FitsFile = read_versioned(&fits)?;
            let kept = pipeline::pseudo_gt(&f, lo, hi)?;
            log::info!("kept {} of {} scenes", kept.scenes.len(), f.scenes.len());
            write_json(&out, &kept)?;
        }
        Command::ExportModel { out } => {
            write_json(&out, scenefit_core::BodyModel::default_humanoid().data())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
