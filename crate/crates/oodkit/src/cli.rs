use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use oodkit_core::scoring::Origin;

use crate::commands::{self, EvaluateArgs, ScoreArgs, SynthArgs, SynthKind};
use crate::config::{Overrides, RunConfig};
use crate::data::Split;
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "oodkit",
    version,
    about = "Multi-exit OOD detection: train, score, calibrate, evaluate"
)]
pub struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["softmax", "energy", "ensemble", "ensemble-weighted", "ensemble_weighted"])]
    pub method: Option<String>,
    /// Energy temperature T.
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Fraction of calibration scores the gate must accept.
    #[arg(long, global = true)]
    pub quantile: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Calibrate,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Calibrate => Some(Split::Calibrate),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OriginArg {
    Id,
    Ood,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Blobs,
    Noise,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one multi-exit model into a checkpoint directory.
    Train {
        /// Dataset manifest (the train split is used).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a deep ensemble into an ensemble directory.
    TrainEnsemble {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score images with the selected method.
    Score {
        /// Checkpoint directory, or ensemble directory for ensemble methods.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "id")]
        origin: OriginArg,
        #[arg(long)]
        out: PathBuf,
        /// Also write malignant-class predictions here.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
    /// Calibrate gate thresholds on ID scores.
    Calibrate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute AUC, FPR95 and ROC curves.
    Evaluate {
        /// ID scores; one file per method.
        #[arg(long, required = true)]
        id: Vec<PathBuf>,
        /// OOD scores as NAME=PATH.
        #[arg(long, value_parser = parse_named)]
        ood: Vec<(String, PathBuf)>,
        #[arg(long)]
        thresholds: Vec<PathBuf>,
        #[arg(long)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a corrupted copy of a dataset.
    Corrupt {
        /// Manifest CSV or a directory containing manifest.csv.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the tables of an evaluation directory.
    Report {
        #[arg(long)]
        eval: PathBuf,
        /// Write the tables here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic image set.
    Synth {
        #[arg(long, value_enum, default_value = "blobs")]
        kind: KindArg,
        /// Images per class in the train split (blobs).
        #[arg(long, default_value_t = 20)]
        train: usize,
        #[arg(long, default_value_t = 10)]
        calibrate: usize,
        /// Images per class in the test split, or total noise images.
        #[arg(long, default_value_t = 10)]
        test: usize,
        /// Image side; defaults to the configured input size.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_named(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected NAME=PATH, got {s:?}")),
    }
}

fn pick(flag: Option<PathBuf>, config: &Option<PathBuf>, what: &str, key: &str) -> Result<PathBuf> {
    flag.or_else(|| config.clone()).ok_or_else(|| {
        Error::Usage(format!(
            "missing {what}: pass --{what} or set paths.{key} in the config"
        ))
    })
}

pub fn run(cli: Cli) -> Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        method: cli.method.clone(),
        temperature: cli.temperature,
        quantile: cli.quantile,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let paths = cfg.paths.clone();
    match cli.command {
        Command::Train { data, out } => {
            let out = pick(out, &paths.output, "out", "output")?;
            let fp = commands::train(&cfg, data.or(paths.data).as_deref(), &out)?;
            println!("checkpoint {} {fp}", out.display());
        }
        Command::TrainEnsemble { data, out } => {
            let out = pick(out, &paths.output, "out", "output")?;
            let fp = commands::train_ensemble(&cfg, data.or(paths.data).as_deref(), &out)?;
            println!("ensemble {} {fp}", out.display());
        }
        Command::Score {
            model,
            data,
            split,
            origin,
            out,
            predictions,
            thresholds,
        } => {
            let model = pick(model, &paths.model, "model", "model")?;
            let data = pick(data, &paths.data, "data", "data")?;
            let n = commands::score(
                &cfg,
                &ScoreArgs {
                    model: &model,
                    data: &data,
                    split: split.split(),
                    origin: match origin {
                        OriginArg::Id => Origin::Id,
                        OriginArg::Ood => Origin::Ood,
                    },
                    out: &out,
                    predictions: predictions.as_deref(),
                    thresholds: thresholds.as_deref(),
                },
            )?;
            println!("scored {n} images into {}", out.display());
        }
        Command::Calibrate { scores, out } => {
            let t = commands::calibrate(&cfg, &scores, &out)?;
            println!("thresholds {:?} at quantile {}", t.thresholds, t.quantile);
        }
        Command::Evaluate {
            id,
            ood,
            thresholds,
            predictions,
            out,
        } => {
            let out = pick(out, &paths.output, "out", "output")?;
            commands::evaluate(
                &cfg,
                &EvaluateArgs {
                    id,
                    ood,
                    thresholds,
                    predictions,
                    out: out.clone(),
                },
            )?;
            println!("metrics written to {}", out.display());
        }
        Command::Corrupt { data, split, out } => {
            let data = pick(data, &paths.data, "data", "data")?;
            let out = pick(out, &paths.output, "out", "output")?;
            let n = commands::corrupt(&cfg, &data, split.split(), &out)?;
            println!("corrupted {n} images into {}", out.display());
        }
        Command::Report { eval, out } => {
            let text = commands::report(&eval)?;
            match out {
                Some(p) => crate::error::write_bytes(&p, text.as_bytes())?,
                None => print!("{text}"),
            }
        }
        Command::Synth {
            kind,
            train,
            calibrate,
            test,
            size,
            out,
        } => {
            let n = commands::synth(
                &cfg,
                &SynthArgs {
                    kind: match kind {
                        KindArg::Blobs => SynthKind::Blobs,
                        KindArg::Noise => SynthKind::Noise,
                    },
                    counts: [train, calibrate, test],
                    size: size.unwrap_or(cfg.input_size),
                    out: out.clone(),
                },
            )?;
            println!("wrote {n} images to {}", out.display());
        }
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Convenience for tests: run with an explicit argument list.
pub fn run_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Usage(e.to_string()))?;
    run(cli)
}
