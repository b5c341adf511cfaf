//! Command-line front end: experiment sweeps, lemma checks, and budget reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use portal_core::env::{variation_budgets, ScenarioSequence};
use portal_core::harness::{instantiate, parse_config, run_experiment, HarnessError};
use portal_core::metrics::lemma_oracles;

#[derive(Debug, Parser)]
#[command(name = "portal", version, about = "Nonstationary policy optimization on low-rank MDPs")]
struct Cli {
    /// Base seed; replaces the config's seed list for `run`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for CSV artifacts.
    #[arg(long, global = true, env = "PORTAL_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads for `run`.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every (variant, seed) cell of an experiment config.
    Run { config: PathBuf },
    /// Check the value-difference identities and the elliptical potential bound
    /// on random instances.
    Oracles {
        n_instances: usize,
        /// Number of random matrix sequences for the potential bound.
        #[arg(long, default_value_t = 100)]
        sequences: usize,
    },
    /// Print the variation budgets of a saved scenario.
    Budgets { scenario: PathBuf },
    /// Instantiate a config's scenario for one seed and save it as JSON.
    ExportScenario { config: PathBuf, output: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}

fn run(cli: Cli) -> Result<i32, HarnessError> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Run { config } => {
            let mut cfg = parse_config(&config)?;
            if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            let out_dir = cli.out_dir.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
            let parallel = cli.parallel.unwrap_or(cfg.parallel);
            let outcome = run_experiment(&cfg, &out_dir, parallel)?;
            for row in &outcome.summary {
                println!("{:<32} n={:<3} gap_ave mean {:.6} std {:.6}", row.variant, row.n, row.mean, row.std);
            }
            for f in &outcome.failures {
                log::error!("{f}");
            }
            println!("summary written to {}", outcome.summary_path.display());
            Ok(outcome.exit_code())
        }
        Command::Oracles { n_instances, sequences } => {
            let report = lemma_oracles(n_instances, sequences, seed)
                .map_err(|e| HarnessError::Run { label: "oracles".into(), seed, message: e.to_string() })?;
            println!("simulation identity: max error {:.3e}", report.simulation_max_error);
            println!("bounded difference: min slack {:.3e}", report.bounded_difference_min_slack);
            println!(
                "elliptical potential: max excess {:.3e}, {} of {} sequences over the bound",
                report.elliptical_max_excess,
                report.elliptical_failures.len(),
                report.elliptical_instances
            );
            for (d, n, lambda0) in &report.elliptical_failures {
                println!("  over bound: d={d} N={n} lambda0={lambda0}");
            }
            let ok = report.simulation_ok(1e-9) && report.bounded_difference_ok(1e-9) && report.elliptical_ok();
            Ok(if ok { 0 } else { 1 })
        }
        Command::Budgets { scenario } => {
            if !scenario.exists() {
                return Err(HarnessError::FileNotFound(scenario));
            }
            let sc = ScenarioSequence::load(&scenario).map_err(|e| HarnessError::Parse(e.to_string()))?;
            let b = variation_budgets(&sc);
            println!("rounds        {}", sc.num_rounds());
            println!("delta_p       {:.6}", b.delta_p);
            println!("delta_sqrt_p  {:.6}", b.delta_sqrt_p);
            println!("delta_phi     {:.6}", b.delta_phi);
            println!("delta_pi      {:.6}", b.delta_pi);
            println!("delta_r       {:.6}", b.delta_r);
            Ok(0)
        }
        Command::ExportScenario { config, output } => {
            let cfg = parse_config(&config)?;
            let (_, sc) = instantiate(&cfg.scenario, seed)
                .map_err(|message| HarnessError::Run { label: "scenario".into(), seed, message })?;
            sc.save(&output).map_err(|e| HarnessError::Run { label: "scenario".into(), seed, message: e.to_string() })?;
            println!("scenario written to {}", output.display());
            Ok(0)
        }
    }
}
