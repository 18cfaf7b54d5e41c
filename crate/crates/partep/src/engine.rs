//! The damped EP outer loop over Gaussian sites in natural parameters.
//!
//! A central coordinator owns the global approximation `g = prior * prod g_k`
//! and the site list. Each iteration forms cavities `g / g_k^eta`, asks a
//! tilted backend for moments, turns them into pending site deltas, and
//! applies the deltas damped; a guard rejects any state whose global
//! precision or cavity precisions are not positive definite, shrinking the
//! damping factor and, after ten consecutive rejections, falling back to
//! eigenvalue-clamping the offending cavities. Serial and synchronous
//! parallel schedules are provided; both derive per-(site, iteration) seeds
//! so results do not depend on the worker count.

use std::io::Write as IoWrite;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::ShardModel;
use crate::natgauss::{clamp_eigenvalues, is_pd, MomentGaussian, NaturalGaussian};
use crate::tilted::{derive_seed, CachedDraws, TiltedBackend, TiltedContext, TiltedMoments};

/// Site update order within an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Serial,
    Parallel,
}

/// How sites are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitPolicy {
    /// `r_k = 0, Q_k = 0`, so the initial global equals the prior.
    Zero,
    /// Broad proper sites: each site is the K-th fractional root of
    /// `N(0, A^2 I)` (`A = init_scale`), so the initial global with a flat
    /// prior is `N(0, A^2 I)`.
    Broad,
}

/// Engine settings.
#[derive(Debug, Clone)]
pub struct EpConfig {
    /// Fractional site exponent, in `(0, 1]`.
    pub eta: f64,
    /// Initial damping level, in `(0, 1]`.
    pub delta0: f64,
    /// Multiplier applied to the damping level on a guard rejection, in `(0, 1)`.
    pub delta_backoff: f64,
    pub max_iters: usize,
    /// Convergence threshold on the max-norm of pending natural-parameter deltas.
    pub conv_tol: f64,
    /// `A` in the broad initialization.
    pub init_scale: f64,
    pub init: InitPolicy,
    pub schedule: Schedule,
    /// Eigenvalue floor used wherever an indefinite matrix must be clamped.
    pub pd_floor: f64,
    /// Base seed; per-site, per-iteration seeds are derived from it.
    pub seed: u64,
}

impl Default for EpConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            delta0: 0.8,
            delta_backoff: 0.5,
            max_iters: 200,
            conv_tol: 1e-6,
            init_scale: 10.0,
            init: InitPolicy::Broad,
            schedule: Schedule::Parallel,
            pd_floor: 1e-6,
            seed: 0,
        }
    }
}

impl EpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidConfig(format!("eta = {} outside (0,1]", self.eta)));
        }
        if !(self.delta0 > 0.0 && self.delta0 <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "delta0 = {} outside (0,1]",
                self.delta0
            )));
        }
        if !(self.delta_backoff > 0.0 && self.delta_backoff < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "delta_backoff = {} outside (0,1)",
                self.delta_backoff
            )));
        }
        if !(self.conv_tol > 0.0) {
            return Err(Error::InvalidConfig("conv_tol must be positive".into()));
        }
        if !(self.pd_floor > 0.0) {
            return Err(Error::InvalidConfig("pd_floor must be positive".into()));
        }
        if self.init == InitPolicy::Broad && !(self.init_scale > 0.0) {
            return Err(Error::InvalidConfig(
                "init_scale must be positive for broad initialization".into(),
            ));
        }
        Ok(())
    }
}

/// Pending natural-parameter update for one site.
#[derive(Debug, Clone)]
pub struct SiteDelta {
    pub dr: DVector<f64>,
    pub dq: DMatrix<f64>,
}

impl SiteDelta {
    pub fn zero(d: usize) -> Self {
        Self {
            dr: DVector::zeros(d),
            dq: DMatrix::zeros(d, d),
        }
    }

    pub fn dr_inf(&self) -> f64 {
        self.dr.amax()
    }

    pub fn dq_inf(&self) -> f64 {
        self.dq.amax()
    }
}

/// One partition's site approximation and bookkeeping.
#[derive(Debug, Clone)]
pub struct SiteState {
    /// Partition index.
    pub k: usize,
    pub site: NaturalGaussian,
    /// Pending update, applied damped at the start of the next iteration.
    pub delta: SiteDelta,
    /// Site normalizer `log Z_k`, once an update has been accepted.
    pub log_zk: Option<f64>,
    /// Draws from the last tilted approximation, available for reuse.
    pub cached_draws: Option<CachedDraws>,
    /// Full joint tilted moments from the last update (local-parameter
    /// reporting for hierarchical shards).
    pub last_tilted: Option<TiltedMoments>,
}

impl SiteState {
    pub fn new(k: usize, site: NaturalGaussian) -> Self {
        let d = site.dim();
        Self {
            k,
            site,
            delta: SiteDelta::zero(d),
            log_zk: None,
            cached_draws: None,
            last_tilted: None,
        }
    }
}

/// The global approximation together with the prior it includes.
#[derive(Debug, Clone)]
pub struct GlobalApprox {
    pub g: NaturalGaussian,
    pub prior: NaturalGaussian,
}

/// Initialize `K` sites of dimension `d` and assemble the global approximation.
pub fn init_sites(
    k: usize,
    d: usize,
    cfg: &EpConfig,
    prior: &NaturalGaussian,
) -> Result<(GlobalApprox, Vec<SiteState>)> {
    cfg.validate()?;
    if k == 0 || d == 0 {
        return Err(Error::InvalidConfig("need K >= 1 and d >= 1".into()));
    }
    if prior.dim() != d {
        return Err(Error::DimensionMismatch {
            left: prior.dim(),
            right: d,
            context: "prior vs requested dimension",
        });
    }
    let site = match cfg.init {
        InitPolicy::Zero => NaturalGaussian::unit(d),
        InitPolicy::Broad => {
            // K-th root of N(0, A^2 I): Q_k = I / (K A^2)
            NaturalGaussian::isotropic(d, 1.0 / (k as f64 * cfg.init_scale * cfg.init_scale))
        }
    };
    let sites: Vec<SiteState> = (0..k).map(|i| SiteState::new(i, site.clone())).collect();
    let global = rebuild_global(&sites, prior);
    Ok((global, sites))
}

/// Sum the site naturals (in site order) and the prior into the global
/// approximation; records the PD validity of the result.
pub fn rebuild_global(sites: &[SiteState], prior: &NaturalGaussian) -> GlobalApprox {
    let d = prior.dim();
    let mut r = prior.r().clone();
    let mut q = prior.q().clone();
    for s in sites {
        r += s.site.r();
        q += s.site.q();
    }
    let g = NaturalGaussian::new(r, q)
        .expect("site/prior sums preserve symmetry and shape")
        .pd_checked();
    let _ = d;
    GlobalApprox {
        g,
        prior: prior.clone(),
    }
}

/// Cavity distribution of site `s`: `(r - eta r_k, Q - eta Q_k)`.
/// The caller must PD-check before using it as a proper distribution.
pub fn cavity(global: &GlobalApprox, s: &SiteState, eta: f64) -> Result<NaturalGaussian> {
    global.g.divide_scaled(&s.site, eta)
}

/// Tilted results projected onto the shared block, plus the retained mean
/// needed by the clamp policy.
#[derive(Debug, Clone)]
pub struct SharedTilted {
    pub nat: NaturalGaussian,
    pub mean: DVector<f64>,
    pub log_z: f64,
}

/// Project joint tilted moments onto the trailing shared block.
pub fn shared_tilted_of(tm: &TiltedMoments, local_dim: usize) -> Result<SharedTilted> {
    if local_dim == 0 {
        let nat = match &tm.nat {
            Some(n) => n.clone(),
            None => MomentGaussian::new(tm.mean.clone(), tm.cov.clone())?.to_natural()?,
        };
        return Ok(SharedTilted {
            nat,
            mean: tm.mean.clone(),
            log_z: tm.log_z,
        });
    }
    let shared = tm.mean.len() - local_dim;
    let mu = tm.mean.rows(local_dim, shared).clone_owned();
    let mut sigma = tm
        .cov
        .view((local_dim, local_dim), (shared, shared))
        .clone_owned();
    crate::natgauss::symmetrize(&mut sigma);
    let nat = MomentGaussian::new(mu.clone(), sigma)?.to_natural()?;
    Ok(SharedTilted {
        nat,
        mean: mu,
        log_z: tm.log_z,
    })
}

/// Policy for an indefinite tilted precision in [`site_delta_from_tilted`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndefiniteTilted {
    /// Clamp the eigenvalues at the floor and recompute `r = Q mu`,
    /// preserving the tilted mean.
    Clamp,
    /// Drop the update (zero delta).
    Discard,
}

/// Undamped site update from the moment-consistency conditions:
/// `dQ_k = (Q_tilted - Q_cavity)/eta - Q_k` and likewise for `r`, plus the
/// site-normalizer update `log Z_k = log Z_tilted - Psi(tilted) + Psi(cavity)`.
///
/// Returns `(delta, log_zk, clamped)`; `log_zk` is `None` when the update was
/// discarded.
pub fn site_delta_from_tilted(
    t: &SharedTilted,
    cav: &NaturalGaussian,
    s: &SiteState,
    eta: f64,
    pd_floor: f64,
    policy: IndefiniteTilted,
) -> Result<(SiteDelta, Option<f64>, bool)> {
    let d = s.site.dim();
    let mut nat = t.nat.clone();
    let mut clamped = false;
    if !is_pd(nat.q()) {
        match policy {
            IndefiniteTilted::Discard => {
                return Ok((SiteDelta::zero(d), None, false));
            }
            IndefiniteTilted::Clamp => {
                let q = clamp_eigenvalues(nat.q(), pd_floor);
                let r = &q * &t.mean;
                nat = NaturalGaussian::new(r, q)?;
                clamped = true;
            }
        }
    }
    let dq = (nat.q() - cav.q()) / eta - s.site.q();
    let dr = (nat.r() - cav.r()) / eta - s.site.r();
    let log_zk = t.log_z - nat.log_norm()? + cav.log_norm()?;
    Ok((SiteDelta { dr, dq }, Some(log_zk), clamped))
}

/// Damped element-wise update of all sites: `site + delta * pending`.
pub fn apply_damped(sites: &[SiteState], deltas: &[SiteDelta], delta: f64) -> Vec<SiteState> {
    assert_eq!(sites.len(), deltas.len());
    sites
        .iter()
        .zip(deltas.iter())
        .map(|(s, dl)| {
            let r = s.site.r() + &dl.dr * delta;
            let q = s.site.q() + &dl.dq * delta;
            SiteState {
                site: NaturalGaussian::new(r, q).expect("damped update preserves symmetry"),
                delta: SiteDelta::zero(s.site.dim()),
                ..s.clone()
            }
        })
        .collect()
}

/// Guard verdict on a proposed post-update state.
#[derive(Debug)]
pub struct GuardReport {
    pub global: GlobalApprox,
    pub global_pd: bool,
    /// Sites whose cavity precision `Q - eta Q_k` is not positive definite.
    pub bad_cavities: Vec<usize>,
}

impl GuardReport {
    pub fn accept(&self) -> bool {
        self.global_pd && self.bad_cavities.is_empty()
    }
}

/// Accept iff the proposed global precision and every proposed cavity
/// precision are positive definite.
pub fn pd_guard(sites: &[SiteState], prior: &NaturalGaussian, eta: f64) -> GuardReport {
    let global = rebuild_global(sites, prior);
    let global_pd = global.g.pd_flag().unwrap_or(false);
    let mut bad = Vec::new();
    for s in sites {
        let cav_q = global.g.q() - s.site.q() * eta;
        if !is_pd(&cav_q) {
            bad.push(s.k);
        }
    }
    GuardReport {
        global,
        global_pd,
        bad_cavities: bad,
    }
}

/// EP's marginal-likelihood estimate:
/// `sum_k log Z_k + Psi(r, Q) - Psi(r_0, Q_0)`.
///
/// An improper flat prior (`r_0 = 0`, `Q_0 = 0`) contributes no `Psi` term;
/// this convention is logged as a warning.
pub fn log_marginal_likelihood(
    sites: &[SiteState],
    global: &GlobalApprox,
    prior: &NaturalGaussian,
) -> Result<f64> {
    let missing = sites.iter().filter(|s| s.log_zk.is_none()).count();
    if missing > 0 {
        return Err(Error::MissingNormalizers {
            missing,
            total: sites.len(),
        });
    }
    let sum_z: f64 = sites.iter().map(|s| s.log_zk.unwrap()).sum();
    let psi_global = global.g.log_norm()?;
    let flat = prior.q().iter().all(|&v| v == 0.0) && prior.r().iter().all(|&v| v == 0.0);
    let psi_prior = if flat {
        log::warn!("flat prior: skipping Psi(r_0, Q_0) in the marginal likelihood");
        0.0
    } else {
        prior.log_norm()?
    };
    Ok(sum_z + psi_global - psi_prior)
}

/// One `(iteration, site)` record of the run trace.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iter: usize,
    pub site: usize,
    pub dr_inf: f64,
    pub dq_inf: f64,
    pub delta_used: f64,
    pub pd_rejects: usize,
    /// Marginal-likelihood estimate at the end of the iteration (NaN until
    /// every site normalizer exists).
    pub logml: f64,
    /// Wall-clock milliseconds of the iteration.
    pub ms: f64,
}

/// Per-iteration guard events, kept out of the CSV schema.
#[derive(Debug, Clone)]
pub struct IterEvent {
    pub iter: usize,
    /// The accepted state passed the guard (possibly after clamping).
    pub accepted_pd_ok: bool,
    /// Sites whose cavities had to be clamped on acceptance.
    pub clamped_sites: Vec<usize>,
    pub clamped_global: bool,
}

/// Append-only run record; one row per (iteration, site).
#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    pub events: Vec<IterEvent>,
}

impl RunTrace {
    pub const CSV_HEADER: &'static str = "iter,site,dr_inf,dQ_inf,delta_used,pd_rejects,logml,ms";

    pub fn to_csv<W: IoWrite>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.iter, r.site, r.dr_inf, r.dq_inf, r.delta_used, r.pd_rejects, r.logml, r.ms
            )?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.to_csv(&mut f)?;
        Ok(())
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Self> {
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
                if line.trim() != Self::CSV_HEADER {
                    return Err(perr(1, format!("expected header {}", Self::CSV_HEADER)));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 8 {
                return Err(perr(lineno, format!("expected 8 fields, found {}", parts.len())));
            }
            let p_usize = |s: &str, what: &str| {
                s.parse::<usize>()
                    .map_err(|e| perr(lineno, format!("bad {what}: {e}")))
            };
            let p_f64 = |s: &str, what: &str| {
                s.parse::<f64>()
                    .map_err(|e| perr(lineno, format!("bad {what}: {e}")))
            };
            rows.push(TraceRow {
                iter: p_usize(parts[0], "iter")?,
                site: p_usize(parts[1], "site")?,
                dr_inf: p_f64(parts[2], "dr_inf")?,
                dq_inf: p_f64(parts[3], "dQ_inf")?,
                delta_used: p_f64(parts[4], "delta_used")?,
                pd_rejects: p_usize(parts[5], "pd_rejects")?,
                logml: p_f64(parts[6], "logml")?,
                ms: p_f64(parts[7], "ms")?,
            });
        }
        Ok(Self {
            rows,
            events: Vec::new(),
        })
    }
}

/// Result of a run: final state, trace, and convergence flag. A run that hits
/// `max_iters` without meeting the tolerance is returned intact with
/// `converged = false` rather than as a hard error.
#[derive(Debug)]
pub struct RunOutcome {
    pub global: GlobalApprox,
    pub sites: Vec<SiteState>,
    pub trace: RunTrace,
    pub converged: bool,
    pub iters: usize,
}

struct SiteOutcome {
    delta: SiteDelta,
    log_zk: Option<f64>,
    cache: Option<CachedDraws>,
    tilted: TiltedMoments,
}

fn tilt_one_site(
    global: &GlobalApprox,
    site: &SiteState,
    shard: &dyn ShardModel,
    backend: &dyn TiltedBackend,
    cfg: &EpConfig,
    iter: usize,
    clamp_cavity: bool,
) -> Result<SiteOutcome> {
    let mut cav = cavity(global, site, cfg.eta)?;
    if clamp_cavity || !is_pd(cav.q()) {
        let q = clamp_eigenvalues(cav.q(), cfg.pd_floor);
        cav = NaturalGaussian::new(cav.r().clone(), q)?;
    }
    let ctx = TiltedContext {
        site: site.k,
        iter,
        seed: derive_seed(cfg.seed, site.k as u64, iter as u64),
        pd_floor: cfg.pd_floor,
        prev: site.cached_draws.as_ref(),
    };
    let tm = backend.tilted(shard, &cav, cfg.eta, &ctx)?;
    let st = shared_tilted_of(&tm, shard.local_dim())?;
    let (delta, log_zk, _clamped) =
        site_delta_from_tilted(&st, &cav, site, cfg.eta, cfg.pd_floor, IndefiniteTilted::Clamp)?;
    let cache = tm.draws.as_ref().map(|d| CachedDraws {
        draws: d.clone(),
        cavity: cav.clone(),
        eta: cfg.eta,
        log_z: st.log_z,
    });
    Ok(SiteOutcome {
        delta,
        log_zk,
        cache,
        tilted: tm,
    })
}

/// Run the EP iteration to convergence or `max_iters`.
pub fn run(
    global0: GlobalApprox,
    sites0: Vec<SiteState>,
    cfg: &EpConfig,
    backend: &dyn TiltedBackend,
    shards: &[&dyn ShardModel],
) -> Result<RunOutcome> {
    cfg.validate()?;
    if shards.len() != sites0.len() {
        return Err(Error::DimensionMismatch {
            left: shards.len(),
            right: sites0.len(),
            context: "shards vs sites",
        });
    }
    let d = global0.g.dim();
    for s in shards {
        if s.shared_dim() != d {
            return Err(Error::DimensionMismatch {
                left: s.shared_dim(),
                right: d,
                context: "shard shared block vs global",
            });
        }
    }
    let mut global = rebuild_global(&sites0, &global0.prior);
    if !global.g.pd_flag().unwrap_or(false) {
        return Err(Error::InvalidConfig(
            "initial global precision is not positive definite; use broad init or a proper prior"
                .into(),
        ));
    }
    let mut sites = sites0;
    match cfg.schedule {
        Schedule::Parallel => run_parallel(&mut global, &mut sites, cfg, backend, shards)
            .map(|(trace, converged, iters)| RunOutcome {
                global,
                sites,
                trace,
                converged,
                iters,
            }),
        Schedule::Serial => run_serial(&mut global, &mut sites, cfg, backend, shards).map(
            |(trace, converged, iters)| RunOutcome {
                global,
                sites,
                trace,
                converged,
                iters,
            },
        ),
    }
}

/// Propose damped application of the pending deltas, backing the damping off
/// on guard rejections; after ten rejections accept with clamped cavities.
fn propose_damped(
    sites: &[SiteState],
    deltas: &[SiteDelta],
    prior: &NaturalGaussian,
    cfg: &EpConfig,
) -> (Vec<SiteState>, GlobalApprox, f64, usize, Vec<usize>, bool) {
    let mut delta = cfg.delta0;
    let mut rejects = 0usize;
    loop {
        let trial = apply_damped(sites, deltas, delta);
        let report = pd_guard(&trial, prior, cfg.eta);
        if report.accept() {
            return (trial, report.global, delta, rejects, Vec::new(), false);
        }
        rejects += 1;
        if rejects >= 10 {
            let mut global = report.global;
            let mut clamped_global = false;
            if !global.g.pd_flag().unwrap_or(false) {
                let q = clamp_eigenvalues(global.g.q(), cfg.pd_floor);
                global.g = NaturalGaussian::new(global.g.r().clone(), q)
                    .expect("clamped matrix is symmetric")
                    .pd_checked();
                clamped_global = true;
            }
            return (trial, global, delta, rejects, report.bad_cavities, clamped_global);
        }
        delta *= cfg.delta_backoff;
    }
}

fn run_parallel(
    global: &mut GlobalApprox,
    sites: &mut Vec<SiteState>,
    cfg: &EpConfig,
    backend: &dyn TiltedBackend,
    shards: &[&dyn ShardModel],
) -> Result<(RunTrace, bool, usize)> {
    let mut trace = RunTrace::default();
    let mut converged = false;
    let mut iters = 0;

    for iter in 0..cfg.max_iters {
        iters = iter + 1;
        let t0 = Instant::now();
        let deltas: Vec<SiteDelta> = sites.iter().map(|s| s.delta.clone()).collect();
        let (new_sites, new_global, delta_used, rejects, clamped_sites, clamped_global) =
            propose_damped(sites, &deltas, &global.prior, cfg);
        *sites = new_sites;
        *global = new_global;
        trace.events.push(IterEvent {
            iter,
            accepted_pd_ok: global.g.pd_flag().unwrap_or(false),
            clamped_sites: clamped_sites.clone(),
            clamped_global,
        });

        let results: Result<Vec<SiteOutcome>> = (0..sites.len())
            .into_par_iter()
            .map(|i| {
                tilt_one_site(
                    global,
                    &sites[i],
                    shards[i],
                    backend,
                    cfg,
                    iter,
                    clamped_sites.contains(&i),
                )
            })
            .collect();
        let results = results?;

        let mut max_dr = 0.0f64;
        let mut max_dq = 0.0f64;
        for (s, out) in sites.iter_mut().zip(results.into_iter()) {
            max_dr = max_dr.max(out.delta.dr_inf());
            max_dq = max_dq.max(out.delta.dq_inf());
            s.delta = out.delta;
            if let Some(z) = out.log_zk {
                s.log_zk = Some(z);
            }
            if out.cache.is_some() {
                s.cached_draws = out.cache;
            }
            s.last_tilted = Some(out.tilted);
        }

        let logml = log_marginal_likelihood(sites, global, &global.prior).unwrap_or(f64::NAN);
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        for s in sites.iter() {
            trace.rows.push(TraceRow {
                iter,
                site: s.k,
                dr_inf: s.delta.dr_inf(),
                dq_inf: s.delta.dq_inf(),
                delta_used,
                pd_rejects: rejects,
                logml,
                ms,
            });
        }
        if max_dr.max(max_dq) < cfg.conv_tol {
            converged = true;
            break;
        }
    }
    Ok((trace, converged, iters))
}

fn run_serial(
    global: &mut GlobalApprox,
    sites: &mut [SiteState],
    cfg: &EpConfig,
    backend: &dyn TiltedBackend,
    shards: &[&dyn ShardModel],
) -> Result<(RunTrace, bool, usize)> {
    let mut trace = RunTrace::default();
    let mut converged = false;
    let mut iters = 0;

    let k = sites.len();
    for sweep in 0..cfg.max_iters {
        iters = sweep + 1;
        let t0 = Instant::now();
        let mut sweep_max = 0.0f64;
        let mut row_data: Vec<(usize, f64, f64, f64, usize)> = Vec::with_capacity(k);
        let mut sweep_pd_ok = true;
        let mut sweep_clamped: Vec<usize> = Vec::new();

        for i in 0..k {
            let out = tilt_one_site(global, &sites[i], shards[i], backend, cfg, sweep, false)?;
            sweep_max = sweep_max.max(out.delta.dr_inf()).max(out.delta.dq_inf());

            // Damped acceptance for this single site.
            let mut deltas: Vec<SiteDelta> =
                sites.iter().map(|s| SiteDelta::zero(s.site.dim())).collect();
            deltas[i] = out.delta.clone();
            let (new_sites, new_global, delta_used, rejects, clamped_sites, clamped_global) =
                propose_damped(sites, &deltas, &global.prior, cfg);
            sites.clone_from_slice(&new_sites);
            *global = new_global;
            sweep_pd_ok &= global.g.pd_flag().unwrap_or(false);
            sweep_clamped.extend(clamped_sites.iter().copied());
            if clamped_global {
                sweep_pd_ok = false;
            }

            let s = &mut sites[i];
            if let Some(z) = out.log_zk {
                s.log_zk = Some(z);
            }
            if out.cache.is_some() {
                s.cached_draws = out.cache;
            }
            s.last_tilted = Some(out.tilted);
            row_data.push((i, out.delta.dr_inf(), out.delta.dq_inf(), delta_used, rejects));
        }

        let logml = log_marginal_likelihood(sites, global, &global.prior).unwrap_or(f64::NAN);
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        for (site, dr_inf, dq_inf, delta_used, rejects) in row_data {
            trace.rows.push(TraceRow {
                iter: sweep,
                site,
                dr_inf,
                dq_inf,
                delta_used,
                pd_rejects: rejects,
                logml,
                ms,
            });
        }
        trace.events.push(IterEvent {
            iter: sweep,
            accepted_pd_ok: sweep_pd_ok,
            clamped_sites: sweep_clamped,
            clamped_global: false,
        });
        if sweep_max < cfg.conv_tol {
            converged = true;
            break;
        }
    }
    Ok((trace, converged, iters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{conjugate_gaussian_model, LinearGaussianShard, LogisticShard};
    use crate::natgauss::MomentGaussian;
    use crate::tilted::LaplaceBackend;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};

    fn nat(r: &[f64], q: &[f64]) -> NaturalGaussian {
        let d = r.len();
        NaturalGaussian::new(DVector::from_row_slice(r), DMatrix::from_row_slice(d, d, q)).unwrap()
    }

    #[test]
    fn init_zero_equals_prior() {
        let prior = nat(&[0.5, -1.0], &[2.0, 0.0, 0.0, 1.0]);
        let cfg = EpConfig {
            init: InitPolicy::Zero,
            ..Default::default()
        };
        for k in [1, 3, 7] {
            let (global, sites) = init_sites(k, 2, &cfg, &prior).unwrap();
            assert_eq!(global.g.r(), prior.r());
            assert_eq!(global.g.q(), prior.q());
            assert_eq!(sites.len(), k);
        }
    }

    #[test]
    fn init_broad_paper_scale() {
        // K = 50, A = 10, flat prior: global covariance is 10^2 I.
        let prior = NaturalGaussian::unit(3);
        let cfg = EpConfig {
            init: InitPolicy::Broad,
            init_scale: 10.0,
            ..Default::default()
        };
        let (global, _) = init_sites(50, 3, &cfg, &prior).unwrap();
        let m = global.g.to_moments().unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(m.sigma()[(i, i)], 100.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn init_broad_small_arithmetic() {
        // K = 4, A = 2, d = 1: each site Q_k = 1/(4*4) = 1/16, global
        // Q = 4/16 = 1/4, i.e. global covariance A^2 = 4.
        let prior = NaturalGaussian::unit(1);
        let cfg = EpConfig {
            init: InitPolicy::Broad,
            init_scale: 2.0,
            ..Default::default()
        };
        let (global, sites) = init_sites(4, 1, &cfg, &prior).unwrap();
        for s in &sites {
            assert_abs_diff_eq!(s.site.q()[(0, 0)], 1.0 / 16.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(global.g.q()[(0, 0)], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(
            global.g.to_moments().unwrap().sigma()[(0, 0)],
            4.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn cavity_examples() {
        // eta = 1, K = 1, zero site: cavity equals the prior.
        let prior = nat(&[0.25], &[2.0]);
        let cfg = EpConfig {
            init: InitPolicy::Zero,
            ..Default::default()
        };
        let (global, sites) = init_sites(1, 1, &cfg, &prior).unwrap();
        let cav = cavity(&global, &sites[0], 1.0).unwrap();
        assert_eq!(cav.r(), prior.r());
        assert_eq!(cav.q(), prior.q());

        // eta = 1 reduces to plain division.
        let g = nat(&[1.5], &[4.0]);
        let site = SiteState::new(0, nat(&[0.5], &[2.0]));
        let global = GlobalApprox {
            g: g.clone(),
            prior: NaturalGaussian::unit(1),
        };
        let cav = cavity(&global, &site, 1.0).unwrap();
        let div = g.divide(&site.site).unwrap();
        assert_eq!(cav.r(), div.r());
        assert_eq!(cav.q(), div.q());

        // eta = 0.5 arithmetic: Q = 4, Q_k = 2 -> 3.
        let cav = cavity(&global, &site, 0.5).unwrap();
        assert_abs_diff_eq!(cav.q()[(0, 0)], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn site_delta_fixed_point_and_arithmetic() {
        // tilted == global with eta = 1 gives a zero delta (dyadic values
        // make the cancellation exact).
        let site = SiteState::new(0, nat(&[0.5], &[0.5]));
        let g = nat(&[1.0], &[3.0]);
        let cav = g.divide(&site.site).unwrap();
        let tilted = SharedTilted {
            nat: g.clone(),
            mean: g.to_moments().unwrap().mu().clone(),
            log_z: 0.0,
        };
        let (delta, logz, clamped) =
            site_delta_from_tilted(&tilted, &cav, &site, 1.0, 1e-8, IndefiniteTilted::Clamp)
                .unwrap();
        assert_eq!(delta.dr[0], 0.0);
        assert_eq!(delta.dq[(0, 0)], 0.0);
        assert!(logz.is_some());
        assert!(!clamped);

        // 1-d: Q_tilted = 3, Q_cavity = 2, Q_site = 0.5, eta = 1 -> 0.5.
        let site = SiteState::new(0, nat(&[0.0], &[0.5]));
        let cav = nat(&[0.0], &[2.0]);
        let tilted = SharedTilted {
            nat: nat(&[0.0], &[3.0]),
            mean: DVector::zeros(1),
            log_z: 0.0,
        };
        let (delta, _, _) =
            site_delta_from_tilted(&tilted, &cav, &site, 1.0, 1e-8, IndefiniteTilted::Clamp)
                .unwrap();
        assert_abs_diff_eq!(delta.dq[(0, 0)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn site_delta_conjugate_single_update() {
        // One exact tilted update drives the site to the likelihood factor.
        let m = conjugate_gaussian_model(3, 2, 5);
        let cfg = EpConfig {
            init: InitPolicy::Zero,
            ..Default::default()
        };
        let (global, sites) = init_sites(3, 2, &cfg, &m.prior).unwrap();
        let backend = LaplaceBackend::default();
        let cav = cavity(&global, &sites[0], 1.0).unwrap();
        let ctx = crate::tilted::TiltedContext::bare(1);
        let tm = crate::tilted::TiltedBackend::tilted(&backend, &m.shards[0], &cav, 1.0, &ctx)
            .unwrap();
        let st = shared_tilted_of(&tm, 0).unwrap();
        let (delta, _, _) =
            site_delta_from_tilted(&st, &cav, &sites[0], 1.0, 1e-8, IndefiniteTilted::Clamp)
                .unwrap();
        let (r_lik, q_lik, _) = m.shards[0].likelihood_natural();
        // site is zero, so site + delta must equal the likelihood naturals
        assert!((delta.dr - r_lik).amax() < 1e-9);
        assert!((delta.dq - q_lik).amax() < 1e-9);
    }

    #[test]
    fn site_delta_indefinite_policies() {
        let site = SiteState::new(0, nat(&[0.0], &[0.5]));
        let cav = nat(&[0.0], &[2.0]);
        let bad = SharedTilted {
            nat: nat(&[0.0], &[-1.0]),
            mean: DVector::from_row_slice(&[0.5]),
            log_z: -1.0,
        };
        let (delta, logz, clamped) =
            site_delta_from_tilted(&bad, &cav, &site, 1.0, 1e-4, IndefiniteTilted::Discard)
                .unwrap();
        assert_eq!(delta.dq[(0, 0)], 0.0);
        assert!(logz.is_none());
        assert!(!clamped);

        let (delta, logz, clamped) =
            site_delta_from_tilted(&bad, &cav, &site, 1.0, 1e-4, IndefiniteTilted::Clamp).unwrap();
        assert!(clamped);
        assert!(logz.is_some());
        // clamped precision is the floor; mean is preserved through r = Q mu
        let q_til = 1e-4;
        assert_abs_diff_eq!(delta.dq[(0, 0)], q_til - 2.0 - 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(delta.dr[0], q_til * 0.5 - 0.0 - 0.0, epsilon = 1e-15);
    }

    #[test]
    fn apply_damped_examples() {
        let site = SiteState::new(0, nat(&[1.0], &[2.0]));
        let delta = SiteDelta {
            dr: DVector::from_row_slice(&[0.5]),
            dq: DMatrix::from_row_slice(1, 1, &[1.0]),
        };
        let full = apply_damped(&[site.clone()], &[delta.clone()], 1.0);
        assert_eq!(full[0].site.r()[0], 1.5);
        assert_eq!(full[0].site.q()[(0, 0)], 3.0);
        let half = apply_damped(&[site.clone()], &[delta], 0.5);
        assert_eq!(half[0].site.r()[0], 1.25);
        assert_eq!(half[0].site.q()[(0, 0)], 2.5);
        // zero delta leaves the site untouched for any damping
        let zero = SiteDelta::zero(1);
        for d in [1.0, 0.5, 0.3, 0.1] {
            let out = apply_damped(&[site.clone()], &[zero.clone()], d);
            assert_eq!(out[0].site.r(), site.site.r());
            assert_eq!(out[0].site.q(), site.site.q());
        }
    }

    #[test]
    fn rebuild_global_cases() {
        let prior = nat(&[0.5], &[1.0]);
        // all-zero sites -> prior
        let sites: Vec<SiteState> = (0..4).map(|k| SiteState::new(k, NaturalGaussian::unit(1))).collect();
        let g = rebuild_global(&sites, &prior);
        assert_eq!(g.g.r(), prior.r());
        assert_eq!(g.g.q(), prior.q());

        // K identical sites q each with flat prior -> K q
        let site = nat(&[0.25], &[0.5]);
        let sites: Vec<SiteState> = (0..6).map(|k| SiteState::new(k, site.clone())).collect();
        let g = rebuild_global(&sites, &NaturalGaussian::unit(1));
        assert_abs_diff_eq!(g.g.q()[(0, 0)], 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.g.r()[0], 1.5, epsilon = 1e-15);

        // pointwise product-density check at a few points
        let s1 = nat(&[0.3, -0.2], &[1.0, 0.1, 0.1, 0.8]);
        let s2 = nat(&[-0.5, 0.4], &[0.7, -0.2, -0.2, 1.3]);
        let prior2 = nat(&[0.0, 0.0], &[0.5, 0.0, 0.0, 0.5]);
        let sites = vec![SiteState::new(0, s1.clone()), SiteState::new(1, s2.clone())];
        let g = rebuild_global(&sites, &prior2);
        for t in 0..5 {
            let x = DVector::from_fn(2, |i, _| (t as f64 + 1.0) * 0.3 - i as f64 * 0.4);
            let lhs = g.g.log_density_unnorm(&x);
            let rhs = s1.log_density_unnorm(&x)
                + s2.log_density_unnorm(&x)
                + prior2.log_density_unnorm(&x);
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn pd_guard_cases() {
        let prior = nat(&[0.0], &[1.0]);
        // zero sites + PD prior: accept
        let sites: Vec<SiteState> = (0..2).map(|k| SiteState::new(k, NaturalGaussian::unit(1))).collect();
        assert!(pd_guard(&sites, &prior, 1.0).accept());

        // a site exceeding the global in some direction: reject
        let sites = vec![
            SiteState::new(0, nat(&[0.0], &[5.0])),
            SiteState::new(1, nat(&[0.0], &[-4.5])),
        ];
        let report = pd_guard(&sites, &prior, 1.0);
        assert!(!report.accept());
        assert!(report.bad_cavities.contains(&0));
    }

    #[test]
    fn pd_guard_backoff_accepts_at_quarter() {
        // Constructed two-site instance where delta = 1 and 0.5 are rejected
        // but 0.25 passes; checked here against direct eigenvalue reasoning:
        // with sites (1, 1), prior 1, and a pending dq = -7 on site 0, the
        // second cavity is 2 + delta*dq, positive only once delta <= 0.25.
        let prior = nat(&[0.0], &[1.0]);
        let sites = vec![
            SiteState::new(0, nat(&[0.0], &[1.0])),
            SiteState::new(1, nat(&[0.0], &[1.0])),
        ];
        let mut deltas = vec![SiteDelta::zero(1), SiteDelta::zero(1)];
        deltas[0].dq[(0, 0)] = -7.0;
        let cfg = EpConfig {
            delta0: 1.0,
            delta_backoff: 0.5,
            ..Default::default()
        };
        for (delta, expect) in [(1.0, false), (0.5, false), (0.25, true)] {
            let trial = apply_damped(&sites, &deltas, delta);
            assert_eq!(pd_guard(&trial, &prior, 1.0).accept(), expect, "delta {delta}");
        }
        let (_, global, used, rejects, clamped, _) = propose_damped(&sites, &deltas, &prior, &cfg);
        assert_abs_diff_eq!(used, 0.25, epsilon = 1e-15);
        assert_eq!(rejects, 2);
        assert!(clamped.is_empty());
        assert!(global.g.pd_flag().unwrap());
    }

    #[test]
    fn run_single_site_gaussian_is_immediate() {
        let m = conjugate_gaussian_model(1, 2, 11);
        let cfg = EpConfig {
            init: InitPolicy::Zero,
            schedule: Schedule::Parallel,
            delta0: 1.0,
            conv_tol: 1e-10,
            ..Default::default()
        };
        let (global, sites) = init_sites(1, 2, &cfg, &m.prior).unwrap();
        let backend = LaplaceBackend::default();
        let shard_refs: Vec<&dyn crate::models::ShardModel> =
            m.shards.iter().map(|s| s as &dyn crate::models::ShardModel).collect();
        let out = run(global, sites, &cfg, &backend, &shard_refs).unwrap();
        assert!(out.converged);
        assert!(out.iters <= 2);
        assert!((out.global.g.r() - m.exact_posterior.r()).amax() < 1e-10);
        assert!((out.global.g.q() - m.exact_posterior.q()).amax() < 1e-10);
    }

    #[test]
    fn run_conjugate_serial_exact_in_one_sweep() {
        let m = conjugate_gaussian_model(5, 4, 42);
        let cfg = EpConfig {
            init: InitPolicy::Zero,
            schedule: Schedule::Serial,
            eta: 1.0,
            delta0: 1.0,
            conv_tol: 1e-10,
            ..Default::default()
        };
        let (global, sites) = init_sites(5, 4, &cfg, &m.prior).unwrap();
        let backend = LaplaceBackend::default();
        let shard_refs: Vec<&dyn crate::models::ShardModel> =
            m.shards.iter().map(|s| s as &dyn crate::models::ShardModel).collect();
        let out = run(global, sites, &cfg, &backend, &shard_refs).unwrap();
        assert!(out.converged);
        assert!(out.iters <= 2, "took {} sweeps", out.iters);
        assert!((out.global.g.r() - m.exact_posterior.r()).amax() < 1e-8);
        assert!((out.global.g.q() - m.exact_posterior.q()).amax() < 1e-8);

        // marginal likelihood against the analytic evidence
        let logml =
            log_marginal_likelihood(&out.sites, &out.global, &out.global.prior).unwrap();
        assert_abs_diff_eq!(logml, m.exact_log_evidence, epsilon = 1e-6);

        // no accepted-invalid state in the trace
        assert!(out.trace.events.iter().all(|e| e.accepted_pd_ok));
        assert!(out.trace.events.iter().all(|e| e.clamped_sites.is_empty()));
    }

    /// Backend that reports the fixed point: tilted = site * cavity.
    struct EchoSite(Vec<NaturalGaussian>);

    impl crate::tilted::TiltedBackend for EchoSite {
        fn tilted(
            &self,
            _shard: &dyn crate::models::ShardModel,
            cavity: &NaturalGaussian,
            _eta: f64,
            ctx: &crate::tilted::TiltedContext<'_>,
        ) -> crate::error::Result<crate::tilted::TiltedMoments> {
            let nat = self.0[ctx.site].multiply(cavity)?;
            let m = nat.to_moments()?;
            Ok(crate::tilted::TiltedMoments {
                mean: m.mu().clone(),
                cov: m.sigma().clone(),
                nat: Some(nat),
                log_z: 0.0,
                backend: crate::tilted::BackendKind::Laplace,
                ess: None,
                draws: None,
                stabilized: false,
                accept_rate: None,
            })
        }

        fn kind(&self) -> crate::tilted::BackendKind {
            crate::tilted::BackendKind::Laplace
        }
    }

    #[test]
    fn fixed_point_is_damping_invariant() {
        // When every tilted equals the global, one full iteration changes no
        // site, for any damping level; dyadic parameters make this exact.
        let prior = nat(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        let site_nats = vec![
            nat(&[0.5, -0.25], &[0.5, 0.125, 0.125, 0.25]),
            nat(&[-0.125, 0.75], &[0.75, -0.25, -0.25, 1.5]),
            nat(&[0.0, 0.5], &[0.25, 0.0, 0.0, 0.5]),
        ];
        let shards: Vec<LinearGaussianShard> = (0..3)
            .map(|_| LinearGaussianShard::new(DMatrix::zeros(0, 2), DVector::zeros(0), 1.0))
            .collect();
        let shard_refs: Vec<&dyn crate::models::ShardModel> =
            shards.iter().map(|s| s as &dyn crate::models::ShardModel).collect();
        for delta0 in [1.0, 0.5, 0.25, 0.7] {
            let sites: Vec<SiteState> = site_nats
                .iter()
                .enumerate()
                .map(|(k, s)| SiteState::new(k, s.clone()))
                .collect();
            let global = rebuild_global(&sites, &prior);
            let cfg = EpConfig {
                delta0,
                conv_tol: 1e-12,
                max_iters: 4,
                ..Default::default()
            };
            let backend = EchoSite(site_nats.clone());
            let out = run(global, sites, &cfg, &backend, &shard_refs).unwrap();
            assert!(out.converged);
            assert_eq!(out.iters, 1);
            for (s, expect) in out.sites.iter().zip(site_nats.iter()) {
                assert_eq!(s.site.r(), expect.r(), "delta0 {delta0}");
                assert_eq!(s.site.q(), expect.q(), "delta0 {delta0}");
            }
        }
    }

    #[test]
    fn serial_and_parallel_schedules_agree() {
        // Laplace fixed points coincide, so both schedules land on the same
        // natural parameters well within 10x the convergence tolerance.
        let ds = crate::models::simulate_hlogit(1, 60, 3, 31);
        let x = DMatrix::from_fn(60, 3, |i, j| ds.rows[i].x[j]);
        let y = DVector::from_fn(60, |i, _| ds.rows[i].y as f64);
        let shards: Vec<LogisticShard> = (0..3)
            .map(|k| {
                LogisticShard::new(x.rows(k * 20, 20).clone_owned(), y.rows(k * 20, 20).clone_owned())
            })
            .collect();
        let shard_refs: Vec<&dyn crate::models::ShardModel> =
            shards.iter().map(|s| s as &dyn crate::models::ShardModel).collect();
        let prior = NaturalGaussian::isotropic(3, 0.25);
        let conv_tol = 1e-9;
        let mut results = Vec::new();
        for schedule in [Schedule::Serial, Schedule::Parallel] {
            let cfg = EpConfig {
                schedule,
                conv_tol,
                delta0: 0.9,
                max_iters: 300,
                init: InitPolicy::Zero,
                ..Default::default()
            };
            let (global, sites) = init_sites(3, 3, &cfg, &prior).unwrap();
            let backend = LaplaceBackend::default();
            let out = run(global, sites, &cfg, &backend, &shard_refs).unwrap();
            assert!(out.converged);
            assert!(out.trace.events.iter().all(|e| e.accepted_pd_ok));
            results.push(out.global.g.clone());
        }
        assert!((results[0].r() - results[1].r()).amax() < 10.0 * conv_tol);
        assert!((results[0].q() - results[1].q()).amax() < 10.0 * conv_tol);
    }

    #[test]
    fn logml_single_gaussian_site_identity() {
        let m = conjugate_gaussian_model(1, 3, 3);
        let cfg = EpConfig {
            init: InitPolicy::Zero,
            delta0: 1.0,
            conv_tol: 1e-10,
            ..Default::default()
        };
        let (global, sites) = init_sites(1, 3, &cfg, &m.prior).unwrap();
        let backend = LaplaceBackend::default();
        let shard_refs: Vec<&dyn crate::models::ShardModel> =
            m.shards.iter().map(|s| s as &dyn crate::models::ShardModel).collect();
        let out = run(global, sites, &cfg, &backend, &shard_refs).unwrap();
        let logml =
            log_marginal_likelihood(&out.sites, &out.global, &out.global.prior).unwrap();
        // all-Gaussian identity: c + Psi(posterior) - Psi(prior)
        let (r_lik, q_lik, c_lik) = m.shards[0].likelihood_natural();
        let post = NaturalGaussian::new(r_lik + m.prior.r(), q_lik + m.prior.q()).unwrap();
        let expect = c_lik + post.log_norm().unwrap() - m.prior.log_norm().unwrap();
        assert_abs_diff_eq!(logml, expect, epsilon = 1e-9);
    }

    #[test]
    fn logml_requires_normalizers() {
        let prior = nat(&[0.0], &[1.0]);
        let sites = vec![SiteState::new(0, nat(&[0.0], &[1.0]))];
        let global = rebuild_global(&sites, &prior);
        assert!(matches!(
            log_marginal_likelihood(&sites, &global, &prior),
            Err(Error::MissingNormalizers { missing: 1, total: 1 })
        ));
    }

    #[test]
    fn trace_csv_round_trip_and_errors() {
        let trace = RunTrace {
            rows: vec![TraceRow {
                iter: 0,
                site: 1,
                dr_inf: 0.5,
                dq_inf: 0.25,
                delta_used: 0.8,
                pd_rejects: 2,
                logml: f64::NAN,
                ms: 1.5,
            }],
            events: vec![],
        };
        let dir = std::env::temp_dir().join(format!("partep_engine_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trace.csv");
        trace.write_csv(&path).unwrap();
        let back = RunTrace::read_csv(&path).unwrap();
        assert_eq!(back.rows.len(), 1);
        assert_eq!(back.rows[0].site, 1);
        assert!(back.rows[0].logml.is_nan());
        assert_eq!(back.rows[0].delta_used, 0.8);

        // malformed line errors name the line
        std::fs::write(&path, format!("{}\n0,1,bad,0,0,0,0,0\n", RunTrace::CSV_HEADER)).unwrap();
        match RunTrace::read_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn run_zero_max_iters_not_converged() {
        let m = conjugate_gaussian_model(2, 2, 8);
        let cfg = EpConfig {
            init: InitPolicy::Zero,
            max_iters: 0,
            ..Default::default()
        };
        let (global, sites) = init_sites(2, 2, &cfg, &m.prior).unwrap();
        let backend = LaplaceBackend::default();
        let shard_refs: Vec<&dyn crate::models::ShardModel> =
            m.shards.iter().map(|s| s as &dyn crate::models::ShardModel).collect();
        let out = run(global, sites, &cfg, &backend, &shard_refs).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iters, 0);
        assert!(out.trace.rows.is_empty());
    }

    #[test]
    fn run_rejects_improper_start() {
        // zero-init with a flat prior leaves the global indefinite
        let prior = NaturalGaussian::unit(2);
        let cfg = EpConfig {
            init: InitPolicy::Zero,
            ..Default::default()
        };
        let (global, sites) = init_sites(2, 2, &cfg, &prior).unwrap();
        let shards: Vec<LinearGaussianShard> = (0..2)
            .map(|_| LinearGaussianShard::new(DMatrix::zeros(0, 2), DVector::zeros(0), 1.0))
            .collect();
        let shard_refs: Vec<&dyn crate::models::ShardModel> =
            shards.iter().map(|s| s as &dyn crate::models::ShardModel).collect();
        let backend = LaplaceBackend::default();
        assert!(matches!(
            run(global, sites, &cfg, &backend, &shard_refs),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn moment_projection_of_hier_tilted() {
        // shared block of a joint tilted: trailing submatrix of the covariance
        let mean = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        let cov = DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0],
        );
        let tm = crate::tilted::TiltedMoments {
            mean: mean.clone(),
            cov: cov.clone(),
            nat: Some(
                MomentGaussian::new(mean.clone(), cov.clone())
                    .unwrap()
                    .to_natural()
                    .unwrap(),
            ),
            log_z: -2.0,
            backend: crate::tilted::BackendKind::Laplace,
            ess: None,
            draws: None,
            stabilized: false,
            accept_rate: None,
        };
        let st = shared_tilted_of(&tm, 1).unwrap();
        assert_eq!(st.mean.len(), 2);
        assert_abs_diff_eq!(st.mean[0], 2.0, epsilon = 1e-15);
        let m = st.nat.to_moments().unwrap();
        assert_abs_diff_eq!(m.sigma()[(0, 0)], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(m.sigma()[(0, 1)], -0.2, epsilon = 1e-12);
        assert_eq!(st.log_z, -2.0);
    }
}
