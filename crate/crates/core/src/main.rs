use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fbsnn::bench::{default_out, emit_fields, model_from_checkpoint, run_experiment, ExperimentConfig, ExperimentOverrides, Frame};
use fbsnn::verify::run_checks;
use fbsnn::{Error, Result};

#[derive(Parser)]
#[command(name = "fbsnn", version, about = "Forward-backward stochastic neural network solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an experiment over its seeds and write the report.
    Run {
        #[arg(long)]
        experiment: String,
        /// JSON file with overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Train a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Use the 1e5-iteration schedule.
        #[arg(long)]
        full_budget: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the closed-form and diagonalization self-checks.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample a trained checkpoint on a grid.
    Fields {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        grid: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        times: Vec<f64>,
        /// Interpret times physically instead of as network times.
        #[arg(long)]
        physical: bool,
        /// Output CSV (stdout if absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            experiment,
            config,
            seed,
            full_budget,
            out,
        } => {
            let mut cfg = ExperimentConfig::for_id(&experiment)?;
            if full_budget {
                cfg.full_budget();
            }
            if let Some(path) = config {
                let text = std::fs::read_to_string(&path)?;
                let o: ExperimentOverrides = serde_json::from_str(&text)
                    .map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
                cfg.apply(&o)?;
            }
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let out = out.unwrap_or_else(|| default_out(&experiment));
            let report = run_experiment(&cfg, Some(&out))?;
            for e in &report.errors {
                println!(
                    "{:<6} rel_linf {:.3e}  rel_l2 {:.3e}{}",
                    e.component,
                    e.rel_linf,
                    e.rel_l2,
                    if e.absolute { " (absolute)" } else { "" }
                );
            }
            if let Some(g) = report.grad_p_rel_l2 {
                println!("grad_p rel_l2 {g:.3e}");
            }
            println!("wall clock {:.1} s, report in {}", report.wall_clock_seconds, out.display());
        }
        Command::Check { seed } => {
            let results = run_checks(seed)?;
            let mut failed = 0;
            for c in &results {
                println!(
                    "{} {:<60} {:.3e} (tol {:.0e})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.tolerance
                );
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(Error::Usage(format!("{failed} of {} checks failed", results.len())));
            }
        }
        Command::Fields {
            checkpoint,
            grid,
            times,
            physical,
            out,
        } => {
            let model = model_from_checkpoint(&checkpoint)?;
            let frame = if physical { Frame::Physical } else { Frame::Network };
            let table = emit_fields(&model, grid, &times, frame)?;
            match out {
                Some(p) => table.write_csv(std::fs::File::create(p)?)?,
                None => table.write_csv(std::io::stdout().lock())?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
