//! `defront`: one binary driving the desk experiment, stage by stage, over a
//! single run directory.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use defront::config::ExperimentConfig;
use defront::data::write_json;
use defront::pipeline::{self, RunDir};
use defront::Error;

#[derive(Parser)]
#[command(name = "defront", version, about = "Face defrontalization augmentation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Serialize)]
struct Common {
    /// Experiment TOML; missing keys come from its preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps data-loading threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    /// Run directory; overrides the config output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic paired, training and test sets.
    Synth,
    /// Align pairs and faces and cache alignment errors.
    Align,
    /// Pick the augmentation error threshold for the target fraction.
    Calibrate,
    /// Pretrain the flow networks, then train the defrontalization model.
    TrainDefront,
    /// Write both-side defrontalizations of training faces for inspection.
    Defrontalize {
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
    /// Train the embedding backbone with the calibrated augmentation.
    TrainEmbed {
        /// Train without augmentation regardless of the calibration.
        #[arg(long)]
        baseline: bool,
    },
    /// Verification, identification and pose statistics reports.
    Eval,
    /// Embed-only against defrontalize-then-embed latency.
    Bench,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Align => "align",
            Command::Calibrate => "calibrate",
            Command::TrainDefront => "train-defront",
            Command::Defrontalize { .. } => "defrontalize",
            Command::TrainEmbed { .. } => "train-embed",
            Command::Eval => "eval",
            Command::Bench => "bench",
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    started_unix: f64,
    finished_unix: f64,
    duration_secs: f64,
    flags: &'a Common,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    summary: serde_json::Value,
    config: String,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn load_config(common: &Common) -> defront::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one command; returns its inputs, outputs and a JSON summary.
fn execute(
    command: &Command,
    cfg: &ExperimentConfig,
    run: &RunDir,
    device_name: &str,
) -> defront::Result<(Vec<PathBuf>, Vec<PathBuf>, serde_json::Value)> {
    let device = pipeline::parse_device(device_name)?;
    let ds = run.dataset();
    Ok(match command {
        Command::Synth => {
            let d = pipeline::synth(cfg, run)?;
            (vec![], vec![d.dir.clone()], serde_json::json!({ "digest": d.digest }))
        }
        Command::Align => {
            let s = pipeline::align(cfg, run)?;
            (
                vec![ds.pair_manifest.clone(), ds.faces.clone(), ds.test_faces.clone()],
                vec![run.aligned(), run.faces_aligned(), run.errors()],
                to_json(&s)?,
            )
        }
        Command::Calibrate => {
            let r = pipeline::calibrate(cfg, run)?;
            (vec![ds.faces.clone(), run.errors()], vec![run.calibration()], to_json(&r)?)
        }
        Command::TrainDefront => {
            let r = pipeline::train_defront(cfg, run, &device)?;
            let mut outputs = vec![run.flows_checkpoint(), run.defront_checkpoint()];
            outputs.extend(r.defront.checkpoints.iter().cloned());
            outputs.push(run.metrics("flows"));
            outputs.push(run.metrics("defront"));
            (vec![ds.pair_manifest.clone()], outputs, to_json(&r)?)
        }
        Command::Defrontalize { limit } => {
            let written = pipeline::defrontalize(cfg, run, &device, *limit)?;
            (
                vec![run.defront_checkpoint(), ds.faces.clone()],
                vec![run.defrontalized()],
                serde_json::json!({ "images": written.len() }),
            )
        }
        Command::TrainEmbed { baseline } => {
            let r = if *baseline {
                pipeline::train_embed_with_threshold(cfg, run, &device, 0.0)?
            } else {
                pipeline::train_embed(cfg, run, &device)?
            };
            let mut inputs = vec![ds.faces.clone(), run.calibration()];
            if r.threshold > 0.0 {
                inputs.push(run.defront_checkpoint());
            }
            (inputs, vec![run.embed_checkpoint(), run.metrics("embed")], to_json(&r)?)
        }
        Command::Eval => {
            let r = pipeline::evaluate(cfg, run, &device)?;
            (
                vec![run.embed_checkpoint(), ds.test_pairs.clone(), ds.gallery.clone(), ds.probes.clone()],
                vec![run.report("verification.json"), run.report("identification.json")],
                to_json(&r)?,
            )
        }
        Command::Bench => {
            let r = pipeline::bench(cfg, run, &device, device_name)?;
            (
                vec![run.embed_checkpoint(), run.defront_checkpoint()],
                vec![run.report("benchmark.json")],
                to_json(&r)?,
            )
        }
    })
}

fn to_json<T: Serialize>(v: &T) -> defront::Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

/// `ConfigInvalid` from `Error::ConfigInvalid("..")`.
fn error_kind(e: &Error) -> String {
    let debug = format!("{e:?}");
    debug.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error").to_string()
}

fn run(cli: &Cli) -> defront::Result<()> {
    if let Some(n) = cli.common.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::ConfigInvalid(format!("--workers: {e}")))?;
    }
    let cfg = load_config(&cli.common)?;
    let run = RunDir::new(&cfg.output_dir);
    let name = cli.command.name();
    let started_unix = unix_now();
    let clock = Instant::now();
    log::info!("{name}: run directory {}", run.root.display());
    let (inputs, outputs, summary) = execute(&cli.command, &cfg, &run, &cli.common.device)?;
    let manifest = Manifest {
        command: name,
        started_unix,
        finished_unix: unix_now(),
        duration_secs: clock.elapsed().as_secs_f64(),
        flags: &cli.common,
        inputs,
        outputs,
        summary,
        config: cfg.to_toml(),
    };
    write_json(&run.manifest(name), &manifest)?;
    log::info!("{name}: done in {:.1} s", manifest.duration_secs);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({
                "command": cli.command.name(),
                "error": error_kind(&e),
                "message": e.to_string(),
            });
            eprintln!("{report}");
            match e {
                Error::ConfigInvalid(_) | Error::MissingFile(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
