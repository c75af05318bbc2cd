use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use crl_core::harness::{self, RunConfig, SweepAxis};
use crl_core::metrics::{EvalLog, MetricsSummary, ReferenceCurves};

#[derive(Parser)]
#[command(name = "crl", version, about = "Continual model-based RL experiments on gridworlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full task schedule once.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "CRL_OUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Single-task reference curves for forward transfer.
    Reference {
        #[arg(long)]
        config: PathBuf,
        /// Only this task (default: all).
        #[arg(long)]
        task: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "CRL_OUT_DIR")]
        out: Option<PathBuf>,
    },
    /// One run set per value of a config axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// buffer-size, alpha, lambda, insertion or sampling
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, env = "CRL_JOBS")]
        jobs: Option<usize>,
        #[arg(long, env = "CRL_OUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Two-task scenario with an imbalanced budget.
    Imbalance {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, env = "CRL_JOBS")]
        jobs: Option<usize>,
        #[arg(long, env = "CRL_OUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Recompute metrics from an eval log.
    Metrics {
        #[arg(long)]
        log: PathBuf,
        /// Reference curves written by `reference`.
        #[arg(long)]
        refs: Option<PathBuf>,
    },
    /// Composition of a saved replay buffer.
    InspectBuffer {
        #[arg(long)]
        buffer: PathBuf,
        /// Steps at which each task after the first began.
        #[arg(long, value_delimiter = ',')]
        task_starts: Vec<u64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::error!("{err:#}");
            let code = match err.downcast_ref::<crl_core::Error>() {
                Some(crl_core::Error::Config(_)) => 2,
                Some(e) if e.is_numerical() => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn load(config: &Path, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut c = RunConfig::load(config)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c)
}

fn write_json<T: serde::Serialize>(out: Option<&Path>, name: &str, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(name);
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            log::info!("wrote {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let c = load(&config, seed)?;
            let output = harness::run_continual(&c, out.as_deref())?;
            let summary = MetricsSummary::compute(&output.log, None)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Reference { config, task, seed, out } => {
            let c = load(&config, seed)?;
            let refs = match task {
                Some(t) => {
                    let mut curves = vec![Vec::new(); c.schedule.tasks.len()];
                    let curve = harness::run_reference(&c, t)?;
                    curves[t] = curve;
                    ReferenceCurves { curves }
                }
                None => harness::run_single_task_references(&c)?,
            };
            write_json(out.as_deref(), "references.json", &refs)?;
        }
        Command::Sweep {
            config,
            axis,
            values,
            seeds,
            jobs,
            out,
        } => {
            let c = load(&config, None)?;
            let seeds: Vec<u64> = (0..seeds).map(|s| c.seed + s).collect();
            let jobs = jobs.unwrap_or_else(harness::jobs_from_env);
            let report = harness::run_sweep(&c, axis, &values, &seeds, jobs)?;
            write_json(out.as_deref(), "sweep.json", &report)?;
        }
        Command::Imbalance { config, seeds, jobs, out } => {
            let c = load(&config, None)?;
            let seeds: Vec<u64> = (0..seeds).map(|s| c.seed + s).collect();
            let jobs = jobs.unwrap_or_else(harness::jobs_from_env);
            let report = harness::scenario_imbalance(&c, &seeds, jobs)?;
            write_json(out.as_deref(), "imbalance.json", &report)?;
        }
        Command::Metrics { log, refs } => {
            let eval = EvalLog::read_csv(&log)?;
            let refs: Option<ReferenceCurves> = match refs {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
                }
                None => None,
            };
            let summary = MetricsSummary::compute(&eval, refs.as_ref())?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::InspectBuffer { buffer, task_starts } => {
            if task_starts.windows(2).any(|w| w[0] >= w[1]) {
                bail!("task starts must be strictly increasing");
            }
            let (counts, shares) = harness::inspect_buffer(&buffer, &task_starts)?;
            for (t, (c, s)) in counts.iter().zip(&shares).enumerate() {
                println!("task {t}: {c} episodes ({:.1}%)", 100.0 * s);
            }
        }
    }
    Ok(())
}
