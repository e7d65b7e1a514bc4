mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory of the run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// oracle | random | qmdp | external:<endpoint>
    #[arg(long, global = true)]
    policy: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate task files into <out>/tasks.
    Gen,
    /// Solve every task and write <out>/solutions.
    Solve,
    /// Export a training corpus into <out>/corpus.
    Export,
    /// Optimality gaps of a policy on the generated tasks or a grid.
    Eval,
    /// Bound-validation simulation for the linear Q-prediction model.
    TheorySim,
    /// Cumulative-reward evaluation on Darkroom goals.
    Darkroom,
    /// Serve a policy over the NDJSON protocol for the tasks in <out>/tasks.
    Serve {
        /// Listen address; without it the protocol runs on stdin/stdout.
        #[arg(long)]
        addr: Option<String>,
    },
    /// Print the effective configuration.
    Config,
}

#[derive(Parser)]
#[command(name = "seqlab", version, about = "Generate, solve, export and evaluate sequential decision tasks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Process exit status.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Check(_) => 3,
        }
    }
}

impl From<seqlab::Error> for Failure {
    fn from(e: seqlab::Error) -> Self {
        use seqlab::Error::*;
        match e {
            Config { .. } | InvalidModel(_) | DimensionMismatch(_) | Parse { .. } | Json(_) => {
                Failure::Validation(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn effective_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(jobs) = common.jobs {
        cfg.jobs = Some(jobs);
    }
    if let Some(policy) = &common.policy {
        cfg.policy = policy.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(w: Cli) -> Result<(), Failure> {
    let cfg = effective_config(&w.common)?;
    if let Some(jobs) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    match w.command {
        Command::Gen => commands::run_logged("gen", &cfg, commands::gen),
        Command::Solve => commands::run_logged("solve", &cfg, commands::solve),
        Command::Export => commands::run_logged("export", &cfg, commands::export),
        Command::Eval => commands::run_logged("eval", &cfg, commands::eval),
        Command::TheorySim => commands::run_logged("theory-sim", &cfg, commands::theory_sim),
        Command::Darkroom => commands::run_logged("darkroom", &cfg, commands::darkroom),
        Command::Serve { addr } => commands::serve(&cfg, addr.as_deref()),
        Command::Config => {
            let text = serde_json::to_string_pretty(&cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
            let _ = writeln!(std::io::stdout(), "{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let w = match Cli::try_parse() {
        Ok(w) => w,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(w) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Validation(m) => format!("invalid configuration: {m}"),
                Failure::Runtime(m) => format!("error: {m}"),
                Failure::Check(m) => format!("check failed: {m}"),
            };
            eprintln!("{msg}");
            ExitCode::from(f.code())
        }
    }
}
