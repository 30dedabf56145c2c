use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use snpla_cli::commands::{self, EXIT_PARTIAL, EXIT_USAGE};
use snpla_cli::config::ExperimentConfig;
use snpla_cli::HarnessError;

#[derive(Parser)]
#[command(name = "snpla", version, about = "Sequential posterior and likelihood approximation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON, see docs/schema.json).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `n_seeds`.
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of one experiment and method.
    Run {
        #[command(flatten)]
        common: Common,
        /// Worker threads (default: available parallelism).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Rerun SNPLA for each lambda on the same observed data.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated lambda values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        lambdas: Vec<f64>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Time posterior sampling: SNPLA flow draws against SNL MCMC.
    Timing {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        /// Train missing checkpoints instead of failing.
        #[arg(long)]
        train_missing: bool,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Simulation-based calibration.
    Sbc {
        #[command(flatten)]
        common: Common,
        /// Replicates (K); defaults to the config's `sbc.replicates`.
        #[arg(long)]
        replicates: Option<usize>,
        /// Posterior draws per replicate (L); defaults to the config.
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Engine self-checks: gradients and flow invariants.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(n) = common.seeds {
        cfg.n_seeds = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<i32, HarnessError> {
    match cli.command {
        Command::Run { common, jobs } => {
            let cfg = load(&common)?;
            let rep = commands::cmd_run(&cfg, jobs)?;
            for r in &rep.results {
                let last = r.records.last();
                let metrics = last.map(|l| format!("{:?}", l.metrics)).unwrap_or_default();
                println!("{}: {} rounds, final {metrics}", r.run_id, r.records.len());
            }
            for (seed, e) in &rep.failures {
                eprintln!("seed {seed} failed: {e}");
            }
            println!("wrote {}", rep.root.display());
            Ok(rep.exit_code())
        }
        Command::Sweep { common, lambdas, jobs } => {
            let cfg = load(&common)?;
            let rep = commands::cmd_sweep(&cfg, &lambdas, jobs)?;
            for p in &rep.points {
                println!(
                    "lambda {}: {} {:.4} (x{:.2} of best){}",
                    p.lambda,
                    p.metric,
                    p.final_metric,
                    p.ratio_to_best,
                    if p.within_spread { "" } else { "  OUTSIDE" }
                );
            }
            Ok(rep.exit_code())
        }
        Command::Timing {
            common,
            draws,
            train_missing,
            jobs,
        } => {
            let cfg = load(&common)?;
            let rep = commands::pool(jobs)?.install(|| commands::cmd_timing(&cfg, draws, train_missing))?;
            println!(
                "{} draws: snpla {:.4} s, snl {:.4} s, ratio {:.1}",
                rep.n_draws,
                rep.snpla_median_sec,
                rep.snl_median_sec,
                rep.ratio()
            );
            Ok(commands::EXIT_OK)
        }
        Command::Sbc {
            common,
            replicates,
            draws,
            jobs,
        } => {
            let cfg = load(&common)?;
            let s = cfg.sbc.clone().unwrap_or_default();
            let (k, l) = (replicates.unwrap_or(s.replicates), draws.unwrap_or(s.posterior_draws));
            let res = commands::pool(jobs)?.install(|| commands::cmd_sbc(&cfg, k, l))?;
            for j in 0..res.histograms.len() {
                println!(
                    "param {}: {}/{} bins in band, chi2 p {:.3}",
                    j + 1,
                    res.bins_in_band(j),
                    res.histograms[j].len(),
                    res.p_values[j]
                );
            }
            Ok(commands::EXIT_OK)
        }
        Command::Gradcheck { seed } => {
            let rep = commands::cmd_gradcheck(seed);
            for c in &rep.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(if rep.passed() { commands::EXIT_OK } else { EXIT_PARTIAL })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE as u8)
        }
    }
}
