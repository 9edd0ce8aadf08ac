use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kdpc_core::experiments::{self, ExperimentConfig, RunReport};

#[derive(Parser, Debug)]
#[command(name = "kdpc", version, about = "Koopman predictive control experiments")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, default_value = "configs/csd.toml")]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Excite the plant with a multisine and write the train/test split.
    GenerateData,
    /// Learn the observables and the multi-step heads.
    Train,
    /// Fit the lifted multi-step predictor and the test R² table.
    FitPredictor,
    /// Terminal cost, gain and invariant set.
    Terminal,
    /// Closed-loop run of the controller on the plant.
    Simulate,
    /// Closed-loop run of the nonlinear MPC comparator.
    Nmpc,
    /// Diagnostics, acceptance checks and the artifact manifest.
    Report,
    /// All stages in order, followed by the report.
    Pipeline,
}

fn print_report(report: &RunReport) {
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("{}", if report.all_passed { "all acceptance checks passed" } else { "acceptance checks failed" });
}

fn run(cli: &Cli) -> kdpc_core::Result<bool> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| kdpc_core::Error::io(out, e))?;
    match cli.command {
        Command::GenerateData => {
            kdpc_core::artifact::write_text(&out.join(experiments::paths::CONFIG), &cfg.to_toml()?)?;
            let m = experiments::generate_data(&cfg, out)?;
            println!("{} samples, split at {}", m.samples, m.split_index);
        }
        Command::Train => {
            let (_, m) = experiments::train(&cfg, out)?;
            println!("{} epochs, best loss {:.6e}", m.epochs_run, m.best_loss);
        }
        Command::FitPredictor => {
            let (_, table) = experiments::fit_predictor_stage(&cfg, out)?;
            print!("{}", table.to_csv());
        }
        Command::Terminal => {
            let (t, check) = experiments::terminal_stage(&cfg, out)?;
            println!("{} rows, spectral radius {:.6}, {} sample violations", t.set.rows(), t.closed_loop_radius, check.total());
        }
        Command::Simulate => {
            let (run, _) = experiments::simulate_stage(&cfg, out)?;
            let infeasible = run.steps.iter().filter(|s| !s.feasible).count();
            println!("{} steps, {infeasible} infeasible", run.steps.len());
        }
        Command::Nmpc => {
            let run = experiments::nmpc_stage(&cfg, out)?;
            println!("{} steps, {} line-search failures", run.costs.len(), run.line_search_failures);
        }
        Command::Report => {
            let report = experiments::emit_report(&cfg, out)?;
            print_report(&report);
            return Ok(report.all_passed);
        }
        Command::Pipeline => {
            let report = experiments::run_pipeline(&cfg, out)?;
            print_report(&report);
            return Ok(report.all_passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
