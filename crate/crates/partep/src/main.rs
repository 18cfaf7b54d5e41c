use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use partep::cli::{self, ExperimentConfig};

/// Batch harness for EP-style inference on partitioned data.
#[derive(Parser)]
#[command(name = "partep", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Config keys, each settable as a flag; flags override the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Config file (TOML; sectioned key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Model kind: hlogit or conjugate.
    #[arg(long)]
    model: Option<String>,
    /// Groups (hlogit) or partitions (conjugate).
    #[arg(long)]
    j: Option<usize>,
    #[arg(long)]
    n_per_group: Option<usize>,
    /// Predictors (hlogit) or parameter dimension (conjugate).
    #[arg(long)]
    d: Option<usize>,
    /// Data-generation seed.
    #[arg(long)]
    data_seed: Option<u64>,
    /// Algorithm seed (tilted backends derive per-site seeds from it).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    groups_per_shard: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    delta0: Option<f64>,
    #[arg(long)]
    delta_backoff: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    conv_tol: Option<f64>,
    #[arg(long)]
    init_scale: Option<f64>,
    /// Site initialization: zero or broad.
    #[arg(long)]
    init: Option<String>,
    /// Update schedule: serial or parallel.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    pd_floor: Option<f64>,
    /// Tilted backend: laplace or mcmc.
    #[arg(long)]
    backend: Option<String>,
    /// Enable or disable importance reuse of cached draws.
    #[arg(long)]
    reuse: Option<bool>,
    #[arg(long)]
    reuse_threshold: Option<f64>,
    #[arg(long)]
    n_warmup: Option<usize>,
    #[arg(long)]
    n_draws: Option<usize>,
    #[arg(long)]
    proposal_scale: Option<f64>,
    #[arg(long)]
    adapt_target: Option<f64>,
    /// Worker threads for the parallel schedule (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig, partep::Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_env()?;
        macro_rules! set {
            ($field:expr, $opt:expr) => {
                if let Some(v) = &$opt {
                    $field = v.clone();
                }
            };
        }
        set!(cfg.output.dir, self.out);
        set!(cfg.model.kind, self.model);
        set!(cfg.model.j, self.j);
        set!(cfg.model.n_per_group, self.n_per_group);
        set!(cfg.model.d, self.d);
        set!(cfg.model.seed, self.data_seed);
        set!(cfg.ep.seed, self.seed);
        set!(cfg.partition.groups_per_shard, self.groups_per_shard);
        set!(cfg.ep.eta, self.eta);
        set!(cfg.ep.delta0, self.delta0);
        set!(cfg.ep.delta_backoff, self.delta_backoff);
        set!(cfg.ep.max_iters, self.max_iters);
        set!(cfg.ep.conv_tol, self.conv_tol);
        set!(cfg.ep.init_scale, self.init_scale);
        set!(cfg.ep.init, self.init);
        set!(cfg.ep.schedule, self.schedule);
        set!(cfg.ep.pd_floor, self.pd_floor);
        set!(cfg.backend.kind, self.backend);
        set!(cfg.backend.reuse, self.reuse);
        set!(cfg.backend.reuse_threshold, self.reuse_threshold);
        set!(cfg.sampler.n_warmup, self.n_warmup);
        set!(cfg.sampler.n_draws, self.n_draws);
        set!(cfg.sampler.proposal_scale, self.proposal_scale);
        set!(cfg.sampler.adapt_target, self.adapt_target);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a dataset and write dataset.csv + truth.csv.
    Simulate {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Fit the configured model; writes trace.csv, summary.csv, coverage.csv.
    Run {
        #[command(flatten)]
        overrides: Overrides,
        /// Dataset CSV (default: <out>/dataset.csv).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Truth sidecar CSV (default: <out>/truth.csv when present).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Render a text report from a trace and summary.
    Report {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        summary: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Cli::parse();
    match dispatch(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(args: Cli) -> Result<ExitCode, partep::Error> {
    match args.cmd {
        Cmd::Simulate { overrides } => {
            let cfg = overrides.resolve()?;
            let paths = cli::cmd_simulate(&cfg)?;
            println!("wrote {}", paths.dataset.display());
            println!("wrote {}", paths.truth.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Run {
            overrides,
            dataset,
            truth,
        } => {
            let cfg = overrides.resolve()?;
            let report = cli::with_workers(overrides.workers, || {
                cli::cmd_run(&cfg, dataset.as_deref(), truth.as_deref())
            })?;
            println!(
                "{} after {} iterations (log marginal likelihood {:.4})",
                if report.converged { "converged" } else { "did not converge" },
                report.iters,
                report.logml,
            );
            println!("wrote {}", report.trace_path.display());
            println!("wrote {}", report.summary_path.display());
            if let Some(p) = &report.coverage_path {
                println!("wrote {}", p.display());
            }
            if report.converged {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(2))
            }
        }
        Cmd::Report {
            trace,
            summary,
            truth,
        } => {
            let (text, _) = cli::cmd_report(&trace, &summary, truth.as_deref())?;
            print!("{text}");
            Ok(ExitCode::SUCCESS)
        }
    }
}
