//! `sbm-lab`: batch driver for the sbm-core experiments.
//!
//! Exit codes: 0 success, 1 run error, 2 config error, 3 failed crosscheck.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use output::Run;

#[derive(Parser, Debug)]
#[command(name = "sbm-lab", version, about = "Experiments on the sparse two-community stochastic block model")]
struct Cli {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long, global = true, env = "SBMLAB_CONFIG")]
    config: Option<PathBuf>,
    /// Master seed; overrides the config seed.
    #[arg(long, global = true, env = "SBMLAB_SEED")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "SBMLAB_THREADS")]
    threads: Option<usize>,
    #[arg(long, global = true, env = "SBMLAB_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Also write a tidy long-format `<command>_plot.csv`.
    #[arg(long, global = true, env = "SBMLAB_EMIT_PLOT_DATA")]
    emit_plot_data: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Free energy and mutual information over a sweep of N.
    EstimateMi,
    /// Parisi variational problem on D_K.
    Variational,
    /// Hopf-Lax formula, optionally as a sweep over K.
    HopfLax,
    /// Grid solution of the shifted Hamilton-Jacobi equation at K <= 1.
    SolveHj,
    /// Fixed points of ν = Γ(μ + tν) and the value along characteristics.
    FixedPoint,
    /// Nishimori, overlap concentration, Franz-de Sanctis and Poisson gap.
    Diagnostics,
    /// Thermodynamic integration vs Parisi vs Hopf-Lax at Δ <= 0.
    Crosscheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::EstimateMi => "estimate-mi",
            Command::Variational => "variational",
            Command::HopfLax => "hopf-lax",
            Command::SolveHj => "solve-hj",
            Command::FixedPoint => "fixed-point",
            Command::Diagnostics => "diagnostics",
            Command::Crosscheck => "crosscheck",
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Vec<String>> {
    let cfg: ExperimentConfig = match &cli.config {
        None => ExperimentConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| vec![format!("reading {}: {e}", path.display())])?;
            serde_json::from_str(&text).map_err(|e| vec![format!("parsing {}: {e}", path.display())])?
        }
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    let cfg = cfg.with_seed(seed);
    let mut v = cfg.violations(cli.command.name());
    if cli.threads == Some(0) {
        v.push("--threads must be positive".into());
    }
    if v.is_empty() {
        Ok(cfg)
    } else {
        Err(v)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = cli.command.name();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(v) => {
            eprintln!("config error ({} violation{}):", v.len(), if v.len() == 1 { "" } else { "s" });
            for s in &v {
                eprintln!("  - {s}");
            }
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let threads = rayon::current_num_threads();
    let result = Run::start(&cli.out_dir, command, &cfg, threads, cli.emit_plot_data).and_then(|mut run| {
        let outcome = commands::run(command, &cfg, &mut run)?;
        let status = if outcome.all_passed { "pass" } else { "fail" };
        run.finish(status, outcome.summary)?;
        Ok(outcome.all_passed)
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) if command == "crosscheck" => {
            eprintln!("crosscheck: at least one acceptance check failed");
            ExitCode::from(3)
        }
        Ok(false) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
