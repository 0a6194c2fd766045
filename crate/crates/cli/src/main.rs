//! `arnold`: run the pipeline and plot its artifacts.
//!
//! Exit codes: 0 success, 1 stage error, 2 config error.

mod manifest;
mod pipeline;
mod plot;

use arnold_core::config::{PipelineConfig, Stage};
use arnold_core::model::build_system;
use clap::{Parser, Subcommand};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

/// Worker-thread count for intra-stage parallelism.
const WORKERS_ENV: &str = "ARNOLD_WORKERS";

#[derive(Parser)]
#[command(name = "arnold", version, about = "Constructive Arnold diffusion pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run pipeline stages, reusing cached artifacts whose inputs are unchanged.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated stages (model, melnikov, reduction, ladder, chain, verify, genericity) or "all".
        #[arg(long, default_value = "all")]
        stages: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an artifact as SVG.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: plot::Kind,
        #[arg(long)]
        out: PathBuf,
        /// L* surface CSV behind a ladder, or ladder JSON behind a chain.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
}

fn config_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("config error: {msg}");
    ExitCode::from(2)
}

fn init_workers() -> Result<(), String> {
    let Ok(v) = std::env::var(WORKERS_ENV) else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| format!("{WORKERS_ENV}={v} is not a positive integer"))?;
    if n == 0 {
        return Err(format!("{WORKERS_ENV} must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn run(config: PathBuf, stages: String, out: PathBuf) -> ExitCode {
    let bytes = match std::fs::read(&config) {
        Ok(b) => b,
        Err(e) => return config_error(format!("{}: {e}", config.display())),
    };
    let cfg: PipelineConfig = match String::from_utf8_lossy(&bytes).parse() {
        Ok(c) => c,
        Err(e) => return config_error(e),
    };
    if let Err(e) = build_system(&cfg.system) {
        return config_error(e);
    }
    let stages = match Stage::parse_list(&stages) {
        Ok(s) => s,
        Err(e) => return config_error(e),
    };
    match pipeline::run(&cfg, &config, &bytes, &stages, &out) {
        Ok(m) => {
            // A closed stdout (e.g. piped into `head`) must not turn a finished run into a failure.
            let mut stdout = std::io::stdout().lock();
            for r in &m.stages {
                let _ = writeln!(stdout, "{:<11} {:<7} {:>8.2}s", r.stage.name(), format!("{:?}", r.status).to_lowercase(), r.seconds);
            }
            ExitCode::SUCCESS
        }
        Err(pipeline::RunError::Io(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(pipeline::RunError::Stages(fails)) => {
            for (s, m) in fails {
                eprintln!("stage {s} failed: {m}");
            }
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_workers() {
        return config_error(e);
    }
    match cli.command {
        Command::Run { config, stages, out } => run(config, stages, out),
        Command::Plot { input, kind, out, overlay } => match plot::render(&input, kind, overlay.as_deref()) {
            Ok(svg) => match std::fs::write(&out, svg) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {}: {e}", out.display());
                    ExitCode::from(1)
                }
            },
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
    }
}
