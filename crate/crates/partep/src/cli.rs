//! Batch experiment harness: configuration files, orchestration, and reports.
//!
//! Experiments are described by a sectioned key=value config (TOML); every
//! key can be overridden by a CLI flag, and `EP_SEED` overrides all seeds.
//! `cmd_simulate` writes a dataset with its truth sidecar, `cmd_run` fits it
//! and writes the trace, posterior summary, and coverage files, and
//! `cmd_report` renders those files into a text report. No interactive UI:
//! traces and summaries are the contract, consumed offline.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::engine::{EpConfig, InitPolicy, RunTrace, Schedule};
use crate::error::{Error, Result};
use crate::hier::marginal_mode_run;
use crate::models::{
    self, conjugate_gaussian_model, coverage_report, hlogit_shards, CoverageReport,
    HLogitDataset, HLogitTruth, ShardModel,
};
use crate::natgauss::NaturalGaussian;
use crate::tilted::{LaplaceBackend, McmcBackend, SamplerConfig, TiltedBackend};

/// Model selection and simulator sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelCfg {
    /// `hlogit` or `conjugate`.
    pub kind: String,
    /// Number of groups (hlogit) or partitions (conjugate).
    pub j: usize,
    pub n_per_group: usize,
    /// Number of predictors (hlogit) or parameter dimension (conjugate).
    pub d: usize,
    /// Data-generation seed.
    pub seed: u64,
}

impl Default for ModelCfg {
    fn default() -> Self {
        Self {
            kind: "hlogit".into(),
            j: 20,
            n_per_group: 40,
            d: 10,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionCfg {
    pub groups_per_shard: usize,
}

impl Default for PartitionCfg {
    fn default() -> Self {
        Self { groups_per_shard: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpCfg {
    pub eta: f64,
    pub delta0: f64,
    pub delta_backoff: f64,
    pub max_iters: usize,
    pub conv_tol: f64,
    pub init_scale: f64,
    /// `zero` or `broad`.
    pub init: String,
    /// `serial` or `parallel`.
    pub schedule: String,
    pub pd_floor: f64,
    /// Algorithm seed (per-site, per-iteration seeds derive from it).
    pub seed: u64,
}

impl Default for EpCfg {
    fn default() -> Self {
        Self {
            eta: 1.0,
            delta0: 0.8,
            delta_backoff: 0.5,
            max_iters: 50,
            conv_tol: 1e-2,
            init_scale: 10.0,
            init: "broad".into(),
            schedule: "parallel".into(),
            pd_floor: 1e-6,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendCfg {
    /// `laplace` or `mcmc`.
    pub kind: String,
    /// Reuse previous draws by importance reweighting (mcmc only).
    pub reuse: bool,
    /// Keep the reweighted sample when `ESS >= reuse_threshold * S`.
    pub reuse_threshold: f64,
}

impl Default for BackendCfg {
    fn default() -> Self {
        Self {
            kind: "mcmc".into(),
            reuse: true,
            reuse_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerCfg {
    pub n_warmup: usize,
    pub n_draws: usize,
    pub proposal_scale: f64,
    pub adapt_target: f64,
}

impl Default for SamplerCfg {
    fn default() -> Self {
        Self {
            n_warmup: 50,
            n_draws: 200,
            proposal_scale: 1.0,
            adapt_target: 0.30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputCfg {
    pub dir: String,
}

impl Default for OutputCfg {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

/// Full experiment description; round-trips losslessly through TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelCfg,
    pub partition: PartitionCfg,
    pub ep: EpCfg,
    pub backend: BackendCfg,
    pub sampler: SamplerCfg,
    pub output: OutputCfg,
}

impl ExperimentConfig {
    pub fn render(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: "<config>".into(),
            line: 0,
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `EP_SEED` (overrides both the data and algorithm seeds).
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("EP_SEED") {
            let seed: u64 = v.parse().map_err(|e| {
                Error::InvalidConfig(format!("EP_SEED must be an unsigned integer: {e}"))
            })?;
            self.model.seed = seed;
            self.ep.seed = seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        match self.model.kind.as_str() {
            "hlogit" | "conjugate" => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown model kind {other:?} (expected hlogit or conjugate)"
                )))
            }
        }
        if self.model.j == 0 || self.model.n_per_group == 0 || self.model.d == 0 {
            return Err(Error::InvalidConfig("model sizes must be positive".into()));
        }
        if self.partition.groups_per_shard == 0 {
            return Err(Error::InvalidConfig("groups_per_shard must be positive".into()));
        }
        match self.backend.kind.as_str() {
            "laplace" | "mcmc" => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown backend {other:?} (expected laplace or mcmc)"
                )))
            }
        }
        self.ep_config()?.validate()?;
        self.sampler_config().validate()?;
        Ok(())
    }

    pub fn ep_config(&self) -> Result<EpConfig> {
        let schedule = match self.ep.schedule.as_str() {
            "serial" => Schedule::Serial,
            "parallel" => Schedule::Parallel,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown schedule {other:?} (expected serial or parallel)"
                )))
            }
        };
        let init = match self.ep.init.as_str() {
            "zero" => InitPolicy::Zero,
            "broad" => InitPolicy::Broad,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown init {other:?} (expected zero or broad)"
                )))
            }
        };
        Ok(EpConfig {
            eta: self.ep.eta,
            delta0: self.ep.delta0,
            delta_backoff: self.ep.delta_backoff,
            max_iters: self.ep.max_iters,
            conv_tol: self.ep.conv_tol,
            init_scale: self.ep.init_scale,
            init,
            schedule,
            pd_floor: self.ep.pd_floor,
            seed: self.ep.seed,
        })
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            n_warmup: self.sampler.n_warmup,
            n_draws: self.sampler.n_draws,
            proposal_scale: self.sampler.proposal_scale,
            adapt_target: self.sampler.adapt_target,
            seed: self.ep.seed,
        }
    }

    pub fn backend(&self) -> Box<dyn TiltedBackend> {
        match self.backend.kind.as_str() {
            "laplace" => Box::new(LaplaceBackend::default()),
            _ => {
                let sc = self.sampler_config();
                if self.backend.reuse {
                    Box::new(McmcBackend::with_reuse(sc, self.backend.reuse_threshold))
                } else {
                    Box::new(McmcBackend::new(sc))
                }
            }
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.output.dir)
    }
}

/// Run a closure inside a rayon pool of the requested size (or the default
/// pool when `workers` is `None`).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match workers {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("worker pool")
            .install(f),
    }
}

/// Paths written by `cmd_simulate`.
#[derive(Debug, Clone)]
pub struct SimulatePaths {
    pub dataset: PathBuf,
    pub truth: PathBuf,
}

/// Simulate the configured dataset and write `dataset.csv` + `truth.csv`.
/// Deterministic under the configured seed: re-runs write identical bytes.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<SimulatePaths> {
    if cfg.model.kind != "hlogit" {
        return Err(Error::InvalidConfig(
            "simulate supports the hlogit model; the conjugate model is generated in-process"
                .into(),
        ));
    }
    let ds = models::simulate_hlogit(cfg.model.j, cfg.model.n_per_group, cfg.model.d, cfg.model.seed);
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)?;
    let dataset = dir.join("dataset.csv");
    let truth = dir.join("truth.csv");
    models::write_dataset_csv(&ds, &dataset)?;
    models::write_truth_csv(ds.truth.as_ref().expect("simulated data has truth"), &truth)?;
    Ok(SimulatePaths { dataset, truth })
}

/// What `cmd_run` produced.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub converged: bool,
    pub iters: usize,
    pub logml: f64,
    pub trace_path: PathBuf,
    pub summary_path: PathBuf,
    pub coverage_path: Option<PathBuf>,
    /// `(name, mean, sd)` per shared coordinate.
    pub summary: Vec<(String, f64, f64)>,
    pub coverage: Option<CoverageReport>,
}

/// Fit the configured model and write `trace.csv`, `summary.csv`, and (when
/// truth is available) `coverage.csv`. Partial outputs are still written on
/// non-convergence; the caller maps that to exit code 2.
pub fn cmd_run(
    cfg: &ExperimentConfig,
    dataset: Option<&Path>,
    truth: Option<&Path>,
) -> Result<RunReport> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)?;
    let ep = cfg.ep_config()?;
    let backend = cfg.backend();

    match cfg.model.kind.as_str() {
        "conjugate" => run_conjugate(cfg, &ep, backend.as_ref(), &dir),
        _ => run_hlogit(cfg, &ep, backend.as_ref(), dataset, truth, &dir),
    }
}

fn write_summary_csv(path: &Path, rows: &[(String, f64, f64)]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "param,mean,sd")?;
    for (name, mean, sd) in rows {
        writeln!(f, "{name},{mean},{sd}")?;
    }
    Ok(())
}

fn write_coverage_csv(path: &Path, report: &CoverageReport) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "level,fraction")?;
    for (level, frac) in [1usize, 2, 3].iter().zip(report.within.iter()) {
        writeln!(f, "{level},{frac}")?;
    }
    Ok(())
}

fn posterior_summary(
    global: &NaturalGaussian,
    names: &[String],
) -> Result<Vec<(String, f64, f64)>> {
    let m = global.to_moments()?;
    Ok(names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), m.mu()[i], m.sigma()[(i, i)].sqrt()))
        .collect())
}

fn run_hlogit(
    cfg: &ExperimentConfig,
    ep: &EpConfig,
    backend: &dyn TiltedBackend,
    dataset: Option<&Path>,
    truth: Option<&Path>,
    dir: &Path,
) -> Result<RunReport> {
    let default_data = dir.join("dataset.csv");
    let data_path = dataset.unwrap_or(&default_data);
    let ds: HLogitDataset = models::read_dataset_csv(data_path)?;
    if ds.d != cfg.model.d {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} predictors but the config says {}",
            ds.d, cfg.model.d
        )));
    }
    let default_truth = dir.join("truth.csv");
    let truth_path = truth
        .map(Path::to_path_buf)
        .or_else(|| default_truth.exists().then(|| default_truth.clone()));
    let truth: Option<HLogitTruth> = match truth_path {
        Some(p) => Some(models::read_truth_csv(&p)?),
        None => None,
    };

    let shards = hlogit_shards(&ds, cfg.partition.groups_per_shard)?;
    let shard_refs: Vec<&dyn ShardModel> = shards.iter().map(|s| s as &dyn ShardModel).collect();
    let d_phi = ds.d + 1;
    // Flat prior on (beta, log tau); the broad site initialization provides
    // the starting regularization.
    let prior = NaturalGaussian::unit(d_phi);
    let outcome = marginal_mode_run(&shard_refs, &prior, ep, backend)?;

    let trace_path = dir.join("trace.csv");
    outcome.trace.write_csv(&trace_path)?;

    let names = shards[0].shared_names();
    let summary = posterior_summary(&outcome.global.g, &names)?;
    let summary_path = dir.join("summary.csv");
    write_summary_csv(&summary_path, &summary)?;

    let logml = outcome
        .trace
        .rows
        .last()
        .map(|r| r.logml)
        .unwrap_or(f64::NAN);

    let (coverage, coverage_path) = match &truth {
        Some(t) => {
            let beta_mean = DVector::from_fn(ds.d, |i, _| summary[i].1);
            let beta_sd = DVector::from_fn(ds.d, |i, _| summary[i].2);
            let report = coverage_report(&beta_mean, &beta_sd, &t.beta);
            let path = dir.join("coverage.csv");
            write_coverage_csv(&path, &report)?;
            (Some(report), Some(path))
        }
        None => (None, None),
    };

    Ok(RunReport {
        converged: outcome.converged,
        iters: outcome.iters,
        logml,
        trace_path,
        summary_path,
        coverage_path,
        summary,
        coverage,
    })
}

fn run_conjugate(
    cfg: &ExperimentConfig,
    ep: &EpConfig,
    backend: &dyn TiltedBackend,
    dir: &Path,
) -> Result<RunReport> {
    let model = conjugate_gaussian_model(cfg.model.j, cfg.model.d, cfg.model.seed);
    let shard_refs: Vec<&dyn ShardModel> =
        model.shards.iter().map(|s| s as &dyn ShardModel).collect();
    let (global, sites) = crate::engine::init_sites(shard_refs.len(), cfg.model.d, ep, &model.prior)?;
    let outcome = crate::engine::run(global, sites, ep, backend, &shard_refs)?;

    let trace_path = dir.join("trace.csv");
    outcome.trace.write_csv(&trace_path)?;

    let names: Vec<String> = (1..=cfg.model.d).map(|i| format!("theta_{i}")).collect();
    let summary = posterior_summary(&outcome.global.g, &names)?;
    let summary_path = dir.join("summary.csv");
    write_summary_csv(&summary_path, &summary)?;
    let logml = outcome
        .trace
        .rows
        .last()
        .map(|r| r.logml)
        .unwrap_or(f64::NAN);

    Ok(RunReport {
        converged: outcome.converged,
        iters: outcome.iters,
        logml,
        trace_path,
        summary_path,
        coverage_path: None,
        summary,
        coverage: None,
    })
}

/// Parse a `param,mean,sd` summary file.
pub fn read_summary_csv(path: &Path) -> Result<Vec<(String, f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if lineno == 1 {
            if line.trim() != "param,mean,sd" {
                return Err(perr(1, "expected header param,mean,sd".into()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(perr(lineno, format!("expected 3 fields, found {}", parts.len())));
        }
        let mean: f64 = parts[1]
            .parse()
            .map_err(|e| perr(lineno, format!("bad mean: {e}")))?;
        let sd: f64 = parts[2]
            .parse()
            .map_err(|e| perr(lineno, format!("bad sd: {e}")))?;
        rows.push((parts[0].to_string(), mean, sd));
    }
    Ok(rows)
}

/// Render a text report from a trace and posterior summary, with a coverage
/// section when a truth sidecar is supplied.
pub fn cmd_report(
    trace_path: &Path,
    summary_path: &Path,
    truth_path: Option<&Path>,
) -> Result<(String, Option<CoverageReport>)> {
    let trace = RunTrace::read_csv(trace_path)?;
    let summary = read_summary_csv(summary_path)?;
    let truth = match truth_path {
        Some(p) => Some(models::read_truth_csv(p)?),
        None => None,
    };

    let mut out = String::new();
    use std::fmt::Write;
    writeln!(out, "run report").unwrap();
    writeln!(out, "==========").unwrap();
    match trace.rows.last() {
        Some(last) => {
            let iters = last.iter + 1;
            let final_dr = trace
                .rows
                .iter()
                .filter(|r| r.iter == last.iter)
                .map(|r| r.dr_inf)
                .fold(0.0f64, f64::max);
            let final_dq = trace
                .rows
                .iter()
                .filter(|r| r.iter == last.iter)
                .map(|r| r.dq_inf)
                .fold(0.0f64, f64::max);
            writeln!(out, "iterations:        {iters}").unwrap();
            writeln!(out, "final max |dr|:    {final_dr:.6e}").unwrap();
            writeln!(out, "final max |dQ|:    {final_dq:.6e}").unwrap();
            writeln!(out, "log marginal lik:  {:.6}", last.logml).unwrap();
            let rejects: usize = trace.rows.iter().map(|r| r.pd_rejects).sum();
            writeln!(out, "pd guard rejects:  {rejects}").unwrap();
        }
        None => {
            writeln!(out, "iterations:        0 (empty trace)").unwrap();
        }
    }
    writeln!(out).unwrap();
    writeln!(out, "posterior summary").unwrap();
    writeln!(out, "{:<12} {:>12} {:>12}", "param", "mean", "sd").unwrap();
    for (name, mean, sd) in &summary {
        writeln!(out, "{name:<12} {mean:>12.5} {sd:>12.5}").unwrap();
    }

    let coverage = match truth {
        Some(t) => {
            // Coverage over the shared regression coefficients.
            let d = t.beta.len();
            let by_name: std::collections::HashMap<&str, (f64, f64)> = summary
                .iter()
                .map(|(n, m, s)| (n.as_str(), (*m, *s)))
                .collect();
            let mut mean = DVector::zeros(d);
            let mut sd = DVector::zeros(d);
            for i in 0..d {
                let key = format!("beta_{}", i + 1);
                let (m, s) = by_name.get(key.as_str()).ok_or_else(|| Error::Parse {
                    path: summary_path.display().to_string(),
                    line: 0,
                    msg: format!("summary is missing {key}"),
                })?;
                mean[i] = *m;
                sd[i] = *s;
            }
            let report = coverage_report(&mean, &sd, &t.beta);
            writeln!(out).unwrap();
            writeln!(out, "coverage of true coefficients (standardized errors)").unwrap();
            for (level, frac) in [1, 2, 3].iter().zip(report.within.iter()) {
                writeln!(out, "within {level} sd: {:.3}", frac).unwrap();
            }
            let worst = report
                .standardized
                .iter()
                .cloned()
                .fold(0.0f64, |a, z| a.max(z.abs()));
            writeln!(out, "worst |z|:   {worst:.3}").unwrap();
            Some(report)
        }
        None => None,
    };
    Ok((out, coverage))
}
