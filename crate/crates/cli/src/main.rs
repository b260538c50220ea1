//! `ren`: dataset preparation, training, evaluation, benchmarking and
//! prediction for region ensemble hand pose networks.
//!
//! Exit codes: 0 success, 1 a requested assertion failed, 2 usage or input
//! error, 3 numerical failure (divergence), 130 interrupted training.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "ren", version, about = "Region ensemble network for 3D hand pose estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic depth dataset (PNG frames plus manifest)
    Synth(commands::SynthArgs),
    /// Preprocess a manifest into a sample cache
    Prepare(commands::PrepareArgs),
    /// Train a network or a bagging ensemble
    Train(commands::TrainArgs),
    /// Evaluate checkpoints or prediction files against ground truth
    Eval(commands::EvalArgs),
    /// Time forward passes
    Bench(commands::BenchArgs),
    /// Write world-space joint predictions in manifest format
    Predict(commands::PredictArgs),
}

/// Settings shared by every command. Flags override the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// Run configuration file (key = value lines)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// basic, basic-large, region-ensemble, region-bagging or basic-bagging
    #[arg(long)]
    variant: Option<String>,
    /// Regions per side of the feature-map grid
    #[arg(long)]
    grid_n: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    /// Use N generated samples instead of a cache
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    /// Networks in a basic-bagging ensemble
    #[arg(long)]
    k: Option<usize>,
    /// Run name, the directory under the runs folder
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Joint count for generated data
    #[arg(long)]
    joints: Option<usize>,
    /// Extra `key=value` settings, as in the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got '{kv}'"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.variant {
            cfg.variant = v.parse()?;
        }
        if let Some(v) = self.grid_n {
            cfg.grid_n = v;
        }
        if let Some(v) = self.iters {
            cfg.train.max_iters = v;
        }
        if let Some(v) = self.batch {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lr0 {
            cfg.train.lr0 = v;
        }
        if let Some(v) = self.synthetic {
            cfg.synthetic = Some(v);
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = &self.name {
            cfg.name = v.clone();
        }
        if let Some(v) = &self.manifest {
            cfg.manifest = Some(v.clone());
        }
        if let Some(v) = &self.cache {
            cfg.cache = Some(v.clone());
        }
        if let Some(v) = self.joints {
            cfg.joints = v;
        }
        Ok(cfg)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<ren::Error>(),
            Some(ren::Error::Diverged { .. } | ren::Error::NonFinite(_))
        )
    });
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Prepare(a) => commands::prepare(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Predict(a) => commands::predict(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
