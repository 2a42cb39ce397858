// SPDX-License-Identifier: MIT OR Apache-2.0
//! `residforge`: command-line driver for the residforge experiments.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use residforge_core::Error;

use crate::commands::Run;
use crate::config::{Backend, LayerRange, RunConfig};

#[derive(Parser)]
#[command(
    name = "residforge",
    version,
    about = "Residual-stream analysis of three-digit addition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, value_enum)]
    backend: Option<Backend>,

    /// Inclusive 1-based layer range, `a..b`.
    #[arg(long, global = true)]
    layers: Option<LayerRange>,

    /// Toy checkpoint for the toy backend.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Bridge endpoint: `tcp://host:port` or `stdio:command args`.
    #[arg(long, global = true)]
    endpoint: Option<String>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Sample instances and patching pairs.
    Gen,
    /// Train the toy transformer and save a checkpoint.
    TrainToy,
    /// Baseline strict accuracy and the baseline-correct subset.
    Baseline,
    /// Cross-sample residual patching curves and boundary.
    PatchSweep,
    /// Cumulative attention ablation.
    Ablate,
    /// Collect last-token states.
    Collect,
    /// Learn context-conditioned direction dictionaries.
    LearnDict,
    /// Fit low-rank bases and Procrustes rotators; layerwise summaries.
    Align,
    /// Strict counterfactual digit edits under every mode.
    Edit,
    /// Edits learned on one template evaluated under others.
    Transport,
    /// Planted-structure oracle suite.
    SynthVerify,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::TrainToy => "train-toy",
            Command::Baseline => "baseline",
            Command::PatchSweep => "patch-sweep",
            Command::Ablate => "ablate",
            Command::Collect => "collect",
            Command::LearnDict => "learn-dict",
            Command::Align => "align",
            Command::Edit => "edit",
            Command::Transport => "transport",
            Command::SynthVerify => "synth-verify",
        }
    }
}

fn resolve(cli: &Cli) -> residforge_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(b) = cli.backend {
        cfg.backend = b;
    }
    if let Some(l) = cli.layers {
        cfg.layers = Some(l);
    }
    if let Some(c) = &cli.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(e) = &cli.endpoint {
        cfg.endpoint = Some(e.clone());
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> residforge_core::Result<()> {
    let mut run = Run::new(cli.command.name(), resolve(cli)?, cli.out.clone())?;
    std::fs::create_dir_all(&run.out)?;
    match cli.command {
        Command::Gen => commands::gen(&mut run)?,
        Command::TrainToy => commands::train(&mut run)?,
        Command::Baseline => commands::baseline(&mut run)?,
        Command::PatchSweep => commands::patch(&mut run)?,
        Command::Ablate => commands::ablate(&mut run)?,
        Command::Collect => commands::collect(&mut run)?,
        Command::LearnDict => commands::learn_dict(&mut run)?,
        Command::Align => commands::align_cmd(&mut run)?,
        Command::Edit => commands::edit(&mut run)?,
        Command::Transport => commands::transport(&mut run)?,
        Command::SynthVerify => commands::synth_verify(&mut run)?,
    }
    run.finish()
}

fn error_json(command: &str, e: &Error) -> String {
    serde_json::json!({
        "error": {
            "command": command,
            "kind": e.kind(),
            "message": e.to_string(),
        }
    })
    .to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(cli.command.name(), &e));
            ExitCode::FAILURE
        }
    }
}
