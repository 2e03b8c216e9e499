//! Batch front-end: run or validate experiment configs, writing CSV results,
//! an optional JSON mirror, and a run manifest.
//!
//! Exit codes: 0 success, 2 config error, 3 numeric failure (partial results
//! are still written, with error rows).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bsde_dro::config::{run_experiment, write_outputs, ExperimentConfig};
use bsde_dro::Error;

#[derive(Parser)]
#[command(name = "bsde-dro", version, about = "BSDE/RBSDE solvers and robust drift sensitivities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every sweep cell of a config and write the results.
    Run {
        /// Path to the JSON experiment config.
        config: PathBuf,
        /// Size of the worker pool (default: all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Directory for the CSV, manifest, and optional JSON mirror.
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
        /// Also write a JSON mirror of the result rows.
        #[arg(long)]
        json: bool,
        /// Print per-row progress to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Check a config without executing it; prints OK or the diagnostics.
    Validate {
        /// Path to the JSON experiment config.
        config: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            workers,
            output_dir,
            json,
            verbose,
        } => run(config, workers, output_dir, json, verbose),
        Command::Validate { config } => validate(config),
    }
}

fn load(path: &PathBuf) -> Result<(ExperimentConfig, String), String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let cfg = ExperimentConfig::from_json(&text).map_err(|e| e.to_string())?;
    Ok((cfg, text))
}

fn validate(path: PathBuf) -> ExitCode {
    let (cfg, _) = match load(&path) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let diags = cfg.validate();
    if diags.is_empty() {
        println!("OK");
        ExitCode::SUCCESS
    } else {
        for d in &diags {
            println!("error: {d}");
        }
        ExitCode::from(EXIT_CONFIG)
    }
}

fn run(
    path: PathBuf,
    workers: Option<usize>,
    output_dir: PathBuf,
    json: bool,
    verbose: bool,
) -> ExitCode {
    let (cfg, text) = match load(&path) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let diags = cfg.validate();
    if !diags.is_empty() {
        for d in &diags {
            eprintln!("error: {d}");
        }
        return ExitCode::from(EXIT_CONFIG);
    }
    if let Some(n) = workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size worker pool: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let rows = match run_experiment(&cfg) {
        Ok(rows) => rows,
        Err(Error::Config(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_NUMERIC);
        }
    };
    if verbose {
        for r in &rows {
            let cell = r
                .sweep_value
                .map_or_else(String::new, |v| format!("{}={v} ", r.sweep_axis));
            match (&r.value, &r.error) {
                (Some(v), _) => eprintln!("{cell}{}: {v}", r.estimator),
                (None, Some(e)) => eprintln!("{cell}{}: error {e}", r.estimator),
                (None, None) => {}
            }
        }
    }
    let failed = rows.iter().any(|r| r.error.is_some());
    match write_outputs(&cfg, &text, &rows, &output_dir, json) {
        Ok(paths) => {
            if verbose {
                eprintln!("wrote {}", paths.csv.display());
            }
        }
        Err(e) => {
            eprintln!("error: cannot write outputs: {e}");
            return ExitCode::from(EXIT_NUMERIC);
        }
    }
    if failed {
        eprintln!("error: some cells failed; see the error column");
        ExitCode::from(EXIT_NUMERIC)
    } else {
        ExitCode::SUCCESS
    }
}
