//! `ssft`: run two-split experiments, sweeps and theory suites from JSON
//! configs, recompute metric tables, and verify artifact directories.
//!
//! Exit codes: 0 success, 1 config error, 2 training divergence, 3 I/O or
//! artifact integrity failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssft_core::experiment::{
    describe_artifact, metrics_from_history, output_root, parse_values, run_all, run_theory, sweep,
    write_metrics_file, ExperimentError, RunConfig, TheoryConfig,
};

#[derive(Parser)]
#[command(name = "ssft", version, about = "Second-split forgetting experiments on synthetic mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run only this seed, overriding the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Smoke-test sizes: short phases, few trials.
    #[arg(long)]
    quick: bool,
    /// Output root; defaults to the config's output_dir, then $SSFT_OUTPUT_ROOT,
    /// then ./ssft-runs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, train both phases, compute metrics and requested analyses.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Repeat a run across values of one config field.
    Sweep {
        config: PathBuf,
        /// Dotted field path, e.g. phase_b.learning_rate.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run the implicit-bias, representer, asymptotic and window suites.
    Theory {
        config: PathBuf,
        /// Trials per suite.
        #[arg(long)]
        trials: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Recompute the metric table from a history directory.
    Metrics {
        history_dir: PathBuf,
        /// Split-A CSV supplying provenance; defaults to ../data/split_a.csv.
        #[arg(long)]
        split_a: Option<PathBuf>,
        /// Output CSV; defaults to <history_dir>/metrics.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify an artifact's manifest and print its summary.
    Report { artifact_dir: PathBuf },
}

fn configure_pool(jobs: Option<usize>) {
    if let Some(n) = jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
}

fn load_run(path: &Path, common: &Common) -> Result<(RunConfig, PathBuf), ExperimentError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if common.quick {
        cfg.make_quick();
    }
    let root = output_root(common.out.as_deref(), cfg.output_dir.as_deref());
    Ok((cfg, root))
}

fn dispatch(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run { config, common } => {
            configure_pool(common.jobs);
            let (cfg, root) = load_run(&config, &common)?;
            let out = run_all(&cfg, &root)?;
            for a in &out.artifacts {
                println!("{}", a.dir.display());
            }
        }
        Command::Sweep {
            config,
            axis,
            values,
            common,
        } => {
            configure_pool(common.jobs);
            let (cfg, root) = load_run(&config, &common)?;
            let (report, art) = sweep(&cfg, &axis, &parse_values(&values), &root)?;
            let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
            if failed > 0 {
                log::warn!("{failed} of {} sweep cells failed", report.cells.len());
            }
            println!("{}", art.dir.display());
        }
        Command::Theory { config, trials, common } => {
            configure_pool(common.jobs);
            let mut cfg = TheoryConfig::load(&config)?;
            if common.quick {
                cfg.make_quick();
            }
            if let Some(t) = trials {
                cfg.set_trials(t);
            }
            if let Some(s) = common.seed {
                cfg.set_seed(s);
            }
            let root = output_root(common.out.as_deref(), cfg.output_dir.as_deref());
            let (_, art) = run_theory(&cfg, &root)?;
            println!("{}", art.dir.display());
        }
        Command::Metrics {
            history_dir,
            split_a,
            out,
        } => {
            let split_a = split_a.or_else(|| {
                let p = history_dir.join("../data/split_a.csv");
                p.exists().then_some(p)
            });
            let records = metrics_from_history(&history_dir, split_a.as_deref())?;
            let out = out.unwrap_or_else(|| history_dir.join("metrics.csv"));
            write_metrics_file(&records, &out)?;
            println!("{}", out.display());
        }
        Command::Report { artifact_dir } => {
            print!("{}", describe_artifact(&artifact_dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
