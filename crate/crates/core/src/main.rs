use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use mixnet::experiment::{compare_policies, reduction, run_experiment, ExperimentError};
use mixnet::mpc::Policy;
use mixnet::pso::Evaluation;
use mixnet::scenario::Scenario;
use mixnet::ScenarioError;

const EXIT_PARSE: u8 = 3;
const EXIT_INVALID: u8 = 4;
const EXIT_RUNTIME: u8 = 5;

/// Guidance and control experiments on a two-subregion mixed network.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one policy closed loop and write its time series and summary.
    Simulate {
        scenario: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(Policy))]
        policy: Policy,
        /// PSO seed; defaults to the scenario's.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate particles on one thread.
        #[arg(long)]
        sequential: bool,
    },
    /// Run NGNC, NCGC, CGC and the CGC compliance sweep.
    Compare {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sequential: bool,
    },
    /// Load and check a scenario file.
    Validate { scenario: PathBuf },
}

fn exit_code(e: &ExperimentError) -> u8 {
    match e {
        ExperimentError::Scenario(s) => scenario_code(s),
        ExperimentError::Model(_) | ExperimentError::Io { .. } => EXIT_RUNTIME,
    }
}

fn scenario_code(e: &ScenarioError) -> u8 {
    match e {
        ScenarioError::Io { .. } | ScenarioError::Parse(_) => EXIT_PARSE,
        _ => EXIT_INVALID,
    }
}

fn mode(sequential: bool) -> Evaluation {
    if sequential {
        Evaluation::Sequential
    } else {
        Evaluation::Parallel
    }
}

fn load(path: &Path) -> Result<Scenario, u8> {
    Scenario::load(path).map_err(|e| {
        eprintln!("error: {e}");
        scenario_code(&e)
    })
}

fn run(cli: Cli) -> Result<(), u8> {
    match cli.command {
        Command::Validate { scenario } => {
            let s = load(&scenario)?;
            let model = s.model().map_err(|e| {
                eprintln!("error: {e}");
                EXIT_INVALID
            })?;
            s.initial_state(&model).map_err(|e| {
                eprintln!("error: {e}");
                EXIT_INVALID
            })?;
            println!(
                "{}: ok ({} routes, {} simulation steps, sha256 {})",
                s.name,
                model.routes.len(),
                s.horizon_steps,
                s.hash()
            );
            Ok(())
        }
        Command::Simulate {
            scenario,
            policy,
            seed,
            out,
            sequential,
        } => {
            let s = load(&scenario)?;
            let seed = seed.unwrap_or(s.mpc.pso.seed);
            let r = run_experiment(&s, policy, seed, &out, mode(sequential)).map_err(|e| {
                error!("{e}");
                eprintln!("error: {e}");
                exit_code(&e)
            })?;
            println!(
                "{}: TTS {:.1} veh h, mean total accumulation {:.0} veh, results in {}",
                r.policy,
                r.summary.tts / 3600.0,
                r.summary.mean_total_accumulation,
                out.display()
            );
            Ok(())
        }
        Command::Compare {
            scenario,
            seed,
            out,
            sequential,
        } => {
            let s = load(&scenario)?;
            let seed = seed.unwrap_or(s.mpc.pso.seed);
            let c = compare_policies(&s, seed, &out, mode(sequential)).map_err(|e| {
                error!("{e}");
                eprintln!("error: {e}");
                exit_code(&e)
            })?;
            for r in &c.runs {
                println!(
                    "{:<14} TTS {:>10.1} veh h  accumulation {:>7.0} veh",
                    r.label,
                    r.summary.tts / 3600.0,
                    r.summary.mean_total_accumulation
                );
            }
            if let (Some(cgc), Some(ngnc)) = (c.get("cgc"), c.get("ngnc")) {
                println!(
                    "CGC vs NGNC: accumulation -{:.2}%, TTS -{:.2}%",
                    reduction(cgc.summary.mean_total_accumulation, ngnc.summary.mean_total_accumulation),
                    reduction(cgc.summary.tts, ngnc.summary.tts)
                );
            }
            println!("results in {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MIXNET_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
