use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crossq::estimators::{study_csv, EstimatorStudy};
use crossq::harness::{run_experiment, write_metrics, ExperimentConfig, TabularConfig};
use crossq::nn::gradient_check;

#[derive(Parser)]
#[command(name = "crossq", version, about = "Cross Q-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate a deep agent; writes one subdirectory per seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the config and CROSSQ_OUT_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Monte Carlo bias of the max estimators on a study spec; CSV to stdout.
    Estimators {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tabular learning error traces; CSV to stdout.
    Tabular {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference check of the network gradients.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        fixtures: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn run_seeds(config: &ExperimentConfig, seeds: &[u64], out: &std::path::Path, jobs: usize) -> crossq::Result<()> {
    let run_one = |seed: u64| -> crossq::Result<()> {
        let log = run_experiment(config, seed)?;
        let dir = out.join(format!("seed_{seed}"));
        write_metrics(&log, &dir)?;
        eprintln!(
            "seed {seed}: final eval mean {:.1}, wrote {}",
            log.final_eval_mean(2),
            dir.display()
        );
        Ok(())
    };
    for chunk in seeds.chunks(jobs.max(1)) {
        let results: Vec<crossq::Result<()>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk.iter().map(|&s| scope.spawn(move || run_one(s))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        });
        results.into_iter().collect::<crossq::Result<()>>()?;
    }
    Ok(())
}

fn execute(cli: Cli) -> crossq::Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            jobs,
        } => {
            let config = ExperimentConfig::load(&config)?;
            let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| config.seeds.clone());
            let out = out.unwrap_or_else(|| config.resolved_out_dir());
            run_seeds(&config, &seeds, &out, jobs)?;
        }
        Command::Estimators { spec, trials, seed } => {
            let study = EstimatorStudy::load(&spec)?;
            print!("{}", study_csv(&study.run(trials, seed)?));
        }
        Command::Tabular { config } => {
            print!("{}", TabularConfig::load(&config)?.run_csv()?);
        }
        Command::Gradcheck { fixtures, seed } => {
            let report = gradient_check(fixtures, seed)?;
            println!(
                "fixtures={} parameters={} max_relative_error={:e}",
                report.fixtures, report.parameters_checked, report.max_relative_error
            );
            if report.max_relative_error >= GRADCHECK_TOLERANCE {
                eprintln!("crossq: gradient check failed (tolerance {GRADCHECK_TOLERANCE:e})");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("crossq: {e}");
            ExitCode::FAILURE
        }
    }
}
