use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use semfed::harness::{self, FitKind, RunOptions};
use semfed::Error;

#[derive(Parser)]
#[command(name = "semfed", version, about = "Federated-learning simulator with constraint-weighted aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Replace the seed list with this single seed.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Only run these variants (repeatable).
    #[arg(long = "variant")]
    variants: Vec<String>,
}

impl Overrides {
    fn options(self) -> RunOptions {
        RunOptions { seed_override: self.seed_override, variants: self.variants }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every variant and seed of an experiment config or manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a grid of experiments.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Fit a theoretical form to a results directory.
    Fit {
        #[arg(value_enum)]
        kind: FitKind,
        /// Run directory (rounds.csv) or sweep directory (summary.csv).
        dir: PathBuf,
        /// Report path; defaults to <dir>/fit_<kind>.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "variant")]
        variants: Vec<String>,
    },
    /// Print a summary of a run or sweep directory.
    Report { dir: PathBuf },
}

fn error_record(e: &Error) -> serde_json::Value {
    let mut rec = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    match e {
        Error::Config { field, .. } => rec["field"] = field.clone().into(),
        Error::Schema { file, column } => {
            rec["file"] = file.clone().into();
            rec["column"] = column.clone().into();
        }
        _ => {}
    }
    rec
}

fn execute(cli: Cli) -> semfed::Result<()> {
    match cli.command {
        Command::Run { config, out, overrides } => {
            let art = harness::cmd_run(&config, &out, &overrides.options())?;
            for r in &art.results {
                println!(
                    "{} seed {}: final metric {:.4}, rounds to 90% {}, mean rho {:.4}",
                    r.variant,
                    r.seed,
                    r.final_metric,
                    r.rounds_to_convergence.map_or("-".to_string(), |v| v.to_string()),
                    r.mean_rho
                );
            }
            println!("wrote {}", art.dir.display());
        }
        Command::Sweep { config, out, overrides } => {
            let art = harness::cmd_sweep(&config, &out, &overrides.options())?;
            println!("{} cells ok, {} failed; wrote {}", art.rows.len(), art.failures.len(), art.dir.display());
        }
        Command::Fit { kind, dir, out, variants } => {
            let report = harness::cmd_fit(&dir, kind, &variants, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Report { dir } => print!("{}", harness::cmd_report(&dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            match e {
                Error::Config { .. } | Error::Schema { .. } | Error::Json(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
