use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bikecross_core::harness::{self, HarnessError, Scenario, Verdict};
use bikecross_core::residual::{self, ExperimentConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bikecross", version, about = "Bikebot obstacle-crossing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario. Exit code 0 = balanced, 2 = balance lost.
    Run {
        scenario: PathBuf,
        /// Directory for state.csv, events.csv, legs.csv and metrics.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_impulse: bool,
        #[arg(long)]
        no_residual: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write roa.csv into the output directory.
        #[arg(long)]
        roa: bool,
    },
    /// Estimate the region of attraction at the scenario's nominal speed.
    Roa {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the post-impact residual model on the synthetic benchmark.
    TrainResidual {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the generated dataset as CSV.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run a scenario for evenly spaced values of one key, e.g.
    /// `--param obstacles.0.h_o=0.02:0.08:4`.
    Sweep {
        scenario: PathBuf,
        #[arg(long)]
        param: String,
        /// CSV output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    // usage errors exit 1; 2 is reserved for a lost balance
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cmd {
        Command::Run { scenario, out, no_impulse, no_residual, seed, roa } => {
            let mut sc = harness::load_scenario(&scenario)?;
            if no_impulse {
                sc.modes.impulse = false;
            }
            if no_residual {
                sc.modes.residual = false;
            }
            if let Some(s) = seed {
                sc.seed = s;
            }
            let log = harness::run(&sc)?;
            let m = match &out {
                Some(dir) => {
                    let atlas = if roa { Some(harness::scenario_roa(&sc)?) } else { None };
                    harness::export(&log, dir, atlas.as_deref())?
                }
                None => harness::metrics(&log),
            };
            println!(
                "{}: max roll {:.2} deg, rmse {:.3} m, crossings {}/{}, impulses {}",
                m.verdict.as_str(),
                m.max_roll_deg,
                m.tracking_rmse,
                m.crossings_succeeded,
                m.crossings_attempted,
                m.impulses_fired
            );
            if let Some(f) = &m.failure {
                eprintln!("failure: {f}");
            }
            Ok(match m.verdict {
                Verdict::Balanced => ExitCode::SUCCESS,
                Verdict::BalanceLost => ExitCode::from(2),
                Verdict::Failed => ExitCode::from(1),
            })
        }
        Command::Roa { scenario, out } => {
            let sc = harness::load_scenario(&scenario)?;
            let atlas = harness::scenario_roa(&sc)?;
            let grid = &atlas.grids[0];
            let f = fs::File::create(&out)?;
            grid.write_csv(std::io::BufWriter::new(f))?;
            println!("{} of {} cells recover at {} m/s", grid.members(), grid.member.len(), grid.speed);
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainResidual { config, out, dataset } => {
            let text = fs::read_to_string(&config).map_err(|e| format!("{}: {e}", config.display()))?;
            let cfg = ExperimentConfig::from_toml_str(&text)?;
            if let Some(path) = dataset {
                let data = residual::generate_synthetic_dataset(&cfg.mismatch, &cfg.params, cfg.examples, cfg.seed)?;
                data.write_csv(std::io::BufWriter::new(fs::File::create(path)?))?;
            }
            let ex = residual::run_experiment(&cfg)?;
            ex.model.write(std::io::BufWriter::new(fs::File::create(&out)?))?;
            let e = &ex.evaluation;
            println!(
                "held-out rmse {:.5} -> {:.5} (ratio {:.3}) over {} rows",
                e.nominal_rmse,
                e.enhanced_rmse,
                e.enhanced_rmse / e.nominal_rmse,
                e.rows
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { scenario, param, out } => {
            let (key, range) = param
                .split_once('=')
                .ok_or_else(|| HarnessError::Parse(format!("--param {param:?} must look like key=a:b:n")))?;
            let values = harness::parse_range(range)?;
            let text = fs::read_to_string(&scenario).map_err(|e| format!("{}: {e}", scenario.display()))?;
            let base: toml::Value = toml::from_str(&text).map_err(|e| HarnessError::Parse(e.to_string()))?;
            // validate the untouched file first so typos surface before the sweep
            Scenario::from_value(base.clone())?;
            let points = harness::sweep(&base, scenario.parent().map(Path::to_path_buf).as_deref(), key, &values)?;
            let csv = harness::sweep_csv(key, &points);
            match out {
                Some(path) => fs::write(path, csv)?,
                None => print!("{csv}"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
