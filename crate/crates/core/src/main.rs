//! Command-line front end: single runs, sweeps, the built-in check
//! suite, and the serving benchmark. Exit codes: 0 on success, 1 when a
//! run or check fails, 2 for configuration problems.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use loralab_core::config::parse_config;
use loralab_core::rng::RandomSource;
use loralab_core::runner::{run_experiment, sweep, sweep_output_stem, SweepAxes};
use loralab_core::serving::bench_serving;
use loralab_core::verify::run_checks;
use loralab_core::Result;

#[derive(Parser)]
#[command(name = "loralab", version, about = "Factorized-adapter optimization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one experiment and write its iteration trace as CSV.
    Run {
        /// Experiment description in TOML.
        #[arg(long)]
        config: PathBuf,
        /// Replaces the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Replaces the config's output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute the Cartesian product of axis overrides on a base config.
    Sweep {
        /// Base experiment description; axis values override it per point.
        #[arg(long)]
        config: PathBuf,
        /// Axis spec `name=v1,v2,...`; repeatable. Axis names: kappa,
        /// rank, init, optimizer.
        #[arg(long = "axis", required = true)]
        axis: Vec<String>,
        /// Runs each point with seeds 0..N.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Re-derive every built-in closed form and structural law.
    Verify,
    /// Time the serving paths on the configured problem shape.
    BenchServe {
        /// Supplies the weight shape, adapter rank, seed, and output path.
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let text = fs::read_to_string(&config)?;
            let mut cfg = parse_config(&text)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(out) = out {
                cfg.output = out;
            }
            let record = run_experiment(&cfg)?;
            let trace = &record.trace;
            println!(
                "wrote {}: {} iterations, final loss {:e}{}",
                cfg.output.display(),
                trace.iterations(),
                trace.final_loss(),
                if trace.converged { "" } else { " (budget exhausted)" },
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, axis, seeds } => {
            let text = fs::read_to_string(&config)?;
            let axes = SweepAxes::parse(&axis)?;
            let outcome = sweep(&text, &axes, seeds)?;
            let summary_path = format!("{}-summary.csv", sweep_output_stem(&text)?);
            fs::write(&summary_path, outcome.summary_csv())?;
            for f in &outcome.failures {
                eprintln!("failed: {} seed {}: {}", f.label, f.seed, f.message);
            }
            println!(
                "{} runs completed, {} failed; summary at {summary_path}",
                outcome.runs.len(),
                outcome.failures.len(),
            );
            Ok(if outcome.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Verify => {
            let report = run_checks();
            print!("{}", report.render());
            Ok(if report.all_passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::BenchServe { config } => {
            let text = fs::read_to_string(&config)?;
            let cfg = parse_config(&text)?;
            let mut rng = RandomSource::named(cfg.seed, "serving-weight");
            let w = rng.gaussian_matrix(cfg.synthetic.m, cfg.synthetic.n, 1.0);
            let report = bench_serving(&w, &[1, 2, 8, 64], cfg.rank, 5, &mut rng)?;
            fs::write(&cfg.output, report.to_csv())?;
            match report.speedup_at(64) {
                Some(s) => println!(
                    "wrote {}; batched over per-user at K=64: {s:.2}x",
                    cfg.output.display()
                ),
                None => println!("wrote {}", cfg.output.display()),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
