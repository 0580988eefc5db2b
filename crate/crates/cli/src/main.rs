mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stoch_turnpike::{reference_problem, Execution, NoiseKind};

use commands::Run;
use config::{ensure_dir, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "stoch-turnpike",
    version,
    about = "Stationary pairs and turnpike diagnostics for stochastic LQ control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Monte Carlo sample count.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Noise law of the built-in instance.
    #[arg(long, global = true, value_parser = config::parse_noise)]
    noise: Option<NoiseKind>,
    /// Run on a single thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Stationary pair and storage function.
    Stationary,
    /// Optimal affine policies for every horizon.
    Solve,
    /// Turnpike metrics and counters across horizons.
    Sweep,
    /// Coupled sample paths under fixed noise realizations.
    Paths,
    /// Direct search over stationary affine feedbacks.
    Statopt {
        #[arg(long)]
        restarts: Option<usize>,
    },
    /// Randomized check of the dissipation inequality.
    DissipativityCheck {
        #[arg(long)]
        probes: Option<usize>,
    },
    /// Runs everything on the built-in instance and checks the reference values.
    ReproducePaper,
}

/// Acceptance failure, reported with exit code 3.
#[derive(Debug)]
struct AcceptanceFailure(String);

impl std::fmt::Display for AcceptanceFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for AcceptanceFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<AcceptanceFailure>().is_some() {
        3
    } else if err.downcast_ref::<stoch_turnpike::Error>().is_some_and(|e| e.is_numerical()) {
        2
    } else {
        // Validation, parse and I/O errors.
        1
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let (mut cfg, base) = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => (ExperimentConfig::default(), PathBuf::new()),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.samples {
        cfg.mc_samples = n;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    match &cli.command {
        Command::Statopt { restarts: Some(r) } => cfg.restarts = *r,
        Command::DissipativityCheck { probes: Some(p) } => cfg.probes = *p,
        _ => {}
    }
    cfg.validate()?;
    let spec = cfg.problem(&base, cli.noise)?;
    ensure_dir(&cfg.output_dir)?;
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let run = Run { out: cfg.output_dir.clone(), cfg, spec, exec };

    match cli.command {
        Command::Stationary => {
            let (pair, storage) = commands::stationary(&run)?;
            println!("K = {:?}", pair.k.as_slice());
            println!("mu_s = {:?}", pair.mu_s.as_slice());
            println!("stationary cost = {}", pair.stationary_cost);
            println!("r = {}", storage.r);
        }
        Command::Solve => commands::solve(&run)?,
        Command::Sweep => {
            let out = commands::sweep(&run)?;
            println!("{} counter rows, {} violations", out.rows, out.violations.len());
            for v in &out.violations {
                println!("  {v}");
            }
        }
        Command::Paths => commands::paths(&run, "paths.csv")?,
        Command::Statopt { .. } => {
            let out = commands::statopt(&run)?;
            println!(
                "best cost {} (gap {:.3e}), matches stationary pair: {}, gradient norm {:.3e}",
                out.report.best.cost, out.report.cost_gap, out.report.matches_pair, out.gradient_norm
            );
        }
        Command::DissipativityCheck { .. } => {
            if !commands::dissipativity(&run)? {
                return Err(AcceptanceFailure("dissipation inequality violated, see dissipativity.json".into()).into());
            }
            println!("dissipation inequality holds on {} probes", run.cfg.probes);
        }
        Command::ReproducePaper => {
            let uniform = match run.cfg.problem {
                None => reference_problem(NoiseKind::Uniform),
                Some(_) => run.spec.clone(),
            };
            let checks = commands::reproduce(&run, &uniform)?;
            let mut failed = 0;
            for c in &checks {
                if c.passed {
                    println!("PASS {}: {}", c.name, c.actual);
                } else {
                    failed += 1;
                    println!("FAIL {}: expected {}, got {}", c.name, c.expected, c.actual);
                }
            }
            if failed > 0 {
                return Err(AcceptanceFailure(format!("{failed} of {} checks failed", checks.len())).into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let numerical = anyhow::Error::from(stoch_turnpike::Error::NonConvergence { iterations: 1, last_change: 1.0 });
        assert_eq!(exit_code(&numerical), 2);
        assert_eq!(exit_code(&anyhow::Error::from(stoch_turnpike::Error::NotDetectable)), 1);
        assert_eq!(exit_code(&config::invalid("x")), 1);
        assert_eq!(exit_code(&AcceptanceFailure("x".into()).into()), 3);
    }
}
