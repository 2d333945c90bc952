//! `lapformer`: dataset generation, training, evaluation and analysis.
//!
//! Exit codes: 0 success, 2 invalid configuration or inputs, 3 I/O
//! failure, 4 non-finite loss during training.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lapformer_core::Error;

#[derive(Debug, Parser)]
#[command(name = "lapformer", version, about = "Laplacian-pyramid frequency attention segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic texture dataset into a directory.
    GenData {
        /// Manifest file (key = value); defaults apply to missing keys.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Train a model; writes a config snapshot, metrics.jsonl and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Ablation flag to switch on; repeatable.
        #[arg(long = "ablate", value_name = "FLAG")]
        ablate: Vec<String>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint and print metrics as JSON.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Layerwise spectral report of two checkpoints as CSV files.
    Spectra {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "checkpoint-a")]
        checkpoint_a: PathBuf,
        #[arg(long = "checkpoint-b")]
        checkpoint_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = lapformer_core::spectral::DEFAULT_CUTOFF)]
        cutoff: f64,
    },
    /// Write the pyramid levels of an image or tensor file.
    PyramidDump {
        /// PNG image or tensor file holding an HxWxC map.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated blur scales.
        #[arg(long, default_value = "1,2,4")]
        sigmas: String,
    },
    /// Dump efficient, frequency and fused attention outputs and contexts.
    AttnProbe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// PNG image or tensor file; defaults to the first test sample.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        stage: usize,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => 3,
            Error::Numerical(_) => 4,
            _ => 2,
        };
        Failure { code, error: e.into() }
    }
}

impl Failure {
    pub fn config(msg: impl std::fmt::Display) -> Self {
        Failure {
            code: 2,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn io(msg: impl std::fmt::Display) -> Self {
        Failure {
            code: 3,
            error: anyhow::anyhow!("{msg}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            manifest,
            out,
            seed,
            train,
            test,
        } => commands::gen_data(manifest.as_deref(), &out, seed, train, test),
        Command::Train {
            config,
            out,
            epochs,
            seed,
            ablate,
            resume,
        } => commands::train(&config, out, epochs, seed, &ablate, resume),
        Command::Eval {
            config,
            checkpoint,
            split,
            out,
        } => commands::eval(&config, &checkpoint, &split, out.as_deref()),
        Command::Spectra {
            config,
            checkpoint_a,
            checkpoint_b,
            out,
            cutoff,
        } => commands::spectra(&config, &checkpoint_a, &checkpoint_b, &out, cutoff),
        Command::PyramidDump { input, out, sigmas } => commands::pyramid_dump(&input, &out, &sigmas),
        Command::AttnProbe {
            config,
            checkpoint,
            input,
            stage,
            layer,
            out,
        } => commands::attn_probe(&config, checkpoint.as_deref(), input.as_deref(), stage, layer, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
