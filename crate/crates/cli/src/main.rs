use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use meadow::config::RunConfig;
use meadow::env::swarm::analytic_oracle;
use meadow::env::Environment;
use meadow::planner::PolicyProfile;
use meadow::protocol::{finite_regime_sweep, plan_known, run_protocol, setup, write_finite_csv};
use meadow::Error;

#[derive(Parser)]
#[command(name = "meadow", version, about = "Safe model-based mean-field reinforcement learning")]
struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, `key=value` or `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> meadow::Result<RunConfig> {
        RunConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the episodic learning protocol and write the run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize once on the true transitions (the known-transitions baseline).
    Plan {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a frozen policy with finite agent populations.
    EvalFinite {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        policy: PathBuf,
        /// Population sizes, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        m: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the analytic swarm solution and its stationarity residual.
    OracleSwarm {
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        /// Optional CSV with `cell_index,center,action,mass`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the initial distribution and, for repositioning, the demand and trip matrix.
    Export {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InfeasibleConstraint(_) => 2,
        Error::DivergedObjective { .. } => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> meadow::Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let config = config.load()?;
            fs::create_dir_all(&out)?;
            let outcome = run_protocol(&config, Some(&out))?;
            if let Some(last) = outcome.episodes.last() {
                println!("final objective {}", last.summary.objective);
            }
            info!("artifacts in {}", out.display());
        }
        Command::Plan { config, out } => {
            let config = config.load()?;
            fs::create_dir_all(&out)?;
            let plan = plan_known(&config, Some(&out))?;
            println!("known-transitions objective {}", plan.objective);
            if !plan.feasible {
                log::warn!("no iterate satisfied the constraint at every step");
            }
        }
        Command::EvalFinite { config, policy, m, seeds, out } => {
            let config = config.load()?;
            let s = setup(&config)?;
            let policy = PolicyProfile::load(&s.env, &policy)?;
            let rows =
                finite_regime_sweep(&s.env, &policy, &s.spec, &s.mu0, &m, seeds, config.protocol.seed, cli.jobs)?;
            create_parent(&out)?;
            write_finite_csv(&out, &rows)?;
            for &count in &m {
                let mut gaps: Vec<f64> = rows.iter().filter(|r| r.agents == count).map(|r| r.abs_gap).collect();
                gaps.sort_by(f64::total_cmp);
                println!("m={count} median |J_m - J| {}", gaps[gaps.len() / 2]);
            }
        }
        Command::OracleSwarm { k, dt, out } => {
            let steps = (1.0 / dt).round();
            if dt.is_nan() || dt <= 0.0 || (steps * dt - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("dt = {dt} does not divide unit time")));
            }
            let oracle = analytic_oracle(k, steps as usize)?;
            println!("action at 0 {}", meadow::env::swarm::analytic_action(0.0));
            println!("total mass {}", oracle.distribution.mass().iter().sum::<f64>());
            println!("stationarity residual {}", oracle.residual);
            if let Some(path) = out {
                create_parent(&path)?;
                let grid = oracle.distribution.grid();
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(["cell_index", "center", "action", "mass"])?;
                for (i, (a, m)) in oracle.actions.iter().zip(oracle.distribution.mass()).enumerate() {
                    w.write_record([i.to_string(), grid.axis_center(i).to_string(), a.to_string(), m.to_string()])?;
                }
                w.flush()?;
            }
        }
        Command::Export { config, out } => {
            let config = config.load()?;
            let s = setup(&config)?;
            fs::create_dir_all(&out)?;
            s.mu0.write_csv(&out.join("mu0.csv"))?;
            if let Environment::Repositioning(r) = &s.env {
                r.demand.write_csv(&out.join("demand.csv"))?;
                r.write_trips_csv(&out.join("trips.csv"))?;
            }
        }
    }
    Ok(())
}

fn create_parent(path: &Path) -> meadow::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => Ok(fs::create_dir_all(p)?),
        _ => Ok(()),
    }
}
