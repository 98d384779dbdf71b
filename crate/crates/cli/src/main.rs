//! `sda`: synthetic cohorts, training, evaluation and fusion for the
//! preterm seizure detector.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sda_core::eeg_io::Split;
use sda_core::SdaError;
use serde_json::json;

use config::{ArchChoice, ExperimentConfig, TrainMode};

#[derive(Parser)]
#[command(name = "sda", version, about = "Preterm EEG seizure detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for training and cohort generation.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    arch: Option<ArchChoice>,
    #[arg(long)]
    stride_s: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a network or an ensemble.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        mode: Option<TrainMode>,
        /// GA group 1, 2 or 3.
        #[arg(long)]
        group: Option<u8>,
        /// Ensemble manifest to fine-tune from.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Score a split and write the metric report and curves.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
        /// Checkpoint file or ensemble manifest.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Pick a fusion of two classifiers on the val split, apply it to the test split.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
        #[arg(long)]
        first: Option<PathBuf>,
        #[arg(long)]
        second: Option<PathBuf>,
        /// Smooth after fusing rather than before.
        #[arg(long)]
        smooth_after_fusion: bool,
    },
    /// Check a dataset manifest.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Splits that must be present, e.g. `train,val`.
        #[arg(long, value_delimiter = ',')]
        require: Vec<Split>,
    },
}

#[derive(Args)]
struct Scoring {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    smooth_width: Option<usize>,
    /// Also report leave-one-record-out AUCs.
    #[arg(long)]
    loo: bool,
    /// Report the detection rate at a false detection budget, `fdh=0.25`.
    #[arg(long)]
    operating_point: Option<String>,
    /// Split to score (fuse always selects on `val`).
    #[arg(long)]
    split: Option<Split>,
}

fn parse_operating_point(s: &str) -> Result<f64> {
    let value = s.strip_prefix("fdh=").unwrap_or(s);
    match value.parse::<f64>() {
        Ok(v) if v >= 0.0 => Ok(v),
        _ => bail!(SdaError::Config(format!("operating point `{s}` is not `fdh=<non-negative number>`"))),
    }
}

fn base_config(common: &Common) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        c.train.seed = seed;
        c.synth.seed = seed;
    }
    if let Some(a) = common.arch {
        c.architecture = a;
    }
    if let Some(s) = common.stride_s {
        c.stride_s = s;
    }
    Ok(c)
}

fn apply_scoring(c: &mut ExperimentConfig, s: Scoring) -> Result<()> {
    if s.manifest.is_some() {
        c.paths.manifest = s.manifest;
    }
    if s.out.is_some() {
        c.paths.output_dir = s.out;
    }
    if let Some(w) = s.smooth_width {
        c.eval.smooth_width = w;
    }
    if s.loo {
        c.eval.loo = true;
    }
    if let Some(op) = s.operating_point {
        c.eval.operating_point_fdh = Some(parse_operating_point(&op)?);
    }
    if let Some(split) = s.split {
        c.eval.split = split;
    }
    Ok(())
}

fn print(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { common, out } => {
            let mut c = base_config(&common)?;
            if out.is_some() {
                c.paths.output_dir = out;
            }
            c.validate()?;
            print(&commands::cmd_synth(&c)?)?;
        }
        Command::Train {
            common,
            manifest,
            out,
            mode,
            group,
            pretrained,
        } => {
            let mut c = base_config(&common)?;
            if manifest.is_some() {
                c.paths.manifest = manifest;
            }
            if out.is_some() {
                c.paths.output_dir = out;
            }
            if pretrained.is_some() {
                c.paths.pretrained = pretrained;
            }
            if let Some(m) = mode {
                c.mode = m;
            }
            if let Some(g) = group {
                c.set_group(g)?;
            }
            c.validate()?;
            print(&commands::cmd_train(&c)?)?;
        }
        Command::Eval { common, scoring, model } => {
            let mut c = base_config(&common)?;
            apply_scoring(&mut c, scoring)?;
            if model.is_some() {
                c.paths.model = model;
            }
            c.validate()?;
            print(&commands::cmd_eval(&c)?)?;
        }
        Command::Fuse {
            common,
            scoring,
            first,
            second,
            smooth_after_fusion,
        } => {
            let mut c = base_config(&common)?;
            apply_scoring(&mut c, scoring)?;
            c.eval.smooth_after_fusion |= smooth_after_fusion;
            if first.is_some() {
                c.paths.first = first;
            }
            if second.is_some() {
                c.paths.second = second;
            }
            c.validate()?;
            print(&commands::cmd_fuse(&c)?)?;
        }
        Command::Validate {
            config,
            manifest,
            require,
        } => {
            let mut c = ExperimentConfig::load(config.as_deref())?;
            if manifest.is_some() {
                c.paths.manifest = manifest;
            }
            let (report, ok) = commands::cmd_validate(&c, &require)?;
            print(&report)?;
            return Ok(ok);
        }
    }
    Ok(true)
}

fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var("SDA_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| SdaError::Config(format!("SDA_THREADS={value} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let kind = err.downcast_ref::<SdaError>().map_or("error", SdaError::kind);
    let kind = if err.downcast_ref::<clap::Error>().is_some() { "usage" } else { kind };
    json!({"error": {"kind": kind, "message": format!("{err:#}")}})
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_json(&anyhow::Error::new(e)));
            return ExitCode::from(2);
        }
    };
    let outcome = init_threads().and_then(|()| run(cli));
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}", json!({"error": {"kind": "invalid_manifest", "message": "manifest validation failed"}}));
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
