use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reflect_rough::experiments::{
    default_tolerances, emit_outputs, emit_to, run_density, run_lemma_suite, run_monotone_convergence, run_rate,
    simulate, verify_trajectory, ExperimentConfig, SimulationTarget, Trajectory,
};
use reflect_rough::skorokhod::SpTolerances;
use reflect_rough::Result;

/// Penalised and reflected rough differential equations.
#[derive(Parser)]
#[command(name = "reflect-rough", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convergence rate of Y^n along n_list on one driver path.
    Rate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides output_dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also check Y^n <= Y^{n+1} and the uniform Cauchy gap.
        #[arg(long)]
        monotone: bool,
    },
    /// Monte-Carlo law of Y_t over mc_paths drivers.
    Density {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes one trajectory as CSV with columns t,Y,K,L.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Penalised solution Y^n; the extrapolated reflected solution when absent.
        #[arg(long)]
        n: Option<u32>,
        #[arg(long, default_value = "trajectory.csv")]
        out: PathBuf,
    },
    /// Randomised check of the scalar penalised estimates.
    LemmaCheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        steps: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Checks a t,Y,K,L trajectory against the configured driver and prints
    /// the certificate as JSON.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
        /// Integral-identity tolerance; five times the mesh gap when absent.
        #[arg(long)]
        integral_tol: Option<f64>,
    },
}

fn load(config: &std::path::Path, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Rate { config, out, monotone } => {
            let cfg = load(&config, out)?;
            let report = run_rate(&cfg)?;
            for f in emit_outputs(&report, &cfg)? {
                log::info!("wrote {}", f.display());
            }
            println!(
                "slope {:.4}, negative-part slope {:.4}, threshold {:.4}: {}",
                report.slope,
                report.neg_slope,
                report.threshold,
                if report.pass { "pass" } else { "fail" }
            );
            let mut ok = report.pass && report.limit_certificate.pass();
            if monotone {
                let m = run_monotone_convergence(&cfg)?;
                emit_outputs(&m, &cfg)?;
                println!("monotone {} cauchy-decreasing {}", m.monotone, m.cauchy_decreasing);
                ok &= m.pass;
            }
            Ok(ok)
        }
        Command::Density { config, out } => {
            let cfg = load(&config, out)?;
            let report = run_density(&cfg)?;
            emit_outputs(&report, &cfg)?;
            println!(
                "atom {:.5} (band {:.5}), KS p {}: {}",
                report.atom,
                report.mc_band,
                report.ks.map_or("n/a".to_string(), |k| format!("{:.4}", k.p_value)),
                if report.pass { "pass" } else { "fail" }
            );
            Ok(report.pass)
        }
        Command::Simulate { config, n, out } => {
            let cfg = load(&config, None)?;
            let target = match n {
                Some(n) => SimulationTarget::Penalised { n },
                None => {
                    let top = cfg.n_list.iter().copied().max().unwrap_or(2);
                    SimulationTarget::Limit { n_max: top.next_power_of_two().max(2) }
                }
            };
            simulate(&cfg, target)?.write_csv(&out)?;
            println!("{}", out.display());
            Ok(true)
        }
        Command::LemmaCheck { cases, seed, steps, out } => {
            let report = run_lemma_suite(cases, seed, steps)?;
            emit_to(&report, &out, None, seed)?;
            println!("{} rows, {} violations", report.rows.len(), report.violations);
            Ok(report.pass)
        }
        Command::Verify { config, trajectory, integral_tol } => {
            let cfg = load(&config, None)?;
            let traj = Trajectory::read_csv(&trajectory)?;
            let mut tol = default_tolerances(&cfg, &traj.y)?;
            if let Some(t) = integral_tol {
                tol = SpTolerances { integral: t, ..tol };
            }
            let cert = verify_trajectory(&cfg, &traj, &tol)?;
            println!("{}", serde_json::to_string_pretty(&cert)?);
            Ok(cert.pass())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
