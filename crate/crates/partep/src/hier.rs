//! Hierarchical EP on shared parameters.
//!
//! Two routes are provided for a model with local parameters `alpha_k` and
//! shared parameters `phi`:
//!
//! * the *marginalized* route ([`marginal_mode_run`]): sites live on `phi`
//!   only, and every tilted computation works over the joint
//!   `(alpha_k, phi)` and keeps just the `phi` moments — this is the engine
//!   loop with shards that carry a local block;
//! * the *explicit-block* route ([`hier_run`]): sites carry the full block
//!   structure `(a_k, b_k, A_k, B_k, C_k)` over `(alpha_k, phi)` with fixed
//!   independent Gaussian priors, and the `phi` marginal and cavities come
//!   from closed-form block algebra that never assembles the joint over all
//!   `alpha`.
//!
//! Closed-form outer sites assembled from inner per-observation sites
//! ([`outer_from_inner`]) link the block route to the dimension-reduced EP of
//! [`crate::lowrank`] for GLM-style shards.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::engine::{self, EpConfig, IterEvent, RunOutcome, RunTrace, TraceRow};
use crate::error::{Error, Result};
use crate::lowrank::{lr_log_marginal_likelihood, lr_run, BatchPlan, Lik1d, LowRankSite, SiteTerm};
use crate::models::ShardModel;
use crate::natgauss::{clamp_eigenvalues, is_pd, symmetrize, MomentGaussian, NaturalGaussian};
use crate::tilted::{derive_seed, CachedDraws, SamplerConfig, TiltedBackend, TiltedContext};

/// One site of the explicit-block route: natural parameters of
/// `g(alpha_k, phi | r_k, Q_k)` partitioned as `r_k = [a_k; b_k]` and
/// `Q_k = [[A_k, C_k], [C_k', B_k]]`.
#[derive(Debug, Clone)]
pub struct HierSite {
    /// `a_k`: alpha-block location.
    pub r_alpha: DVector<f64>,
    /// `b_k`: phi-block location.
    pub r_phi: DVector<f64>,
    /// `A_k`: alpha-block precision.
    pub q_alpha: DMatrix<f64>,
    /// `B_k`: phi-block precision.
    pub q_phi: DMatrix<f64>,
    /// `C_k`: cross block, `d_alpha x d_phi`.
    pub q_cross: DMatrix<f64>,
}

impl HierSite {
    pub fn zero(d_alpha: usize, d_phi: usize) -> Self {
        Self {
            r_alpha: DVector::zeros(d_alpha),
            r_phi: DVector::zeros(d_phi),
            q_alpha: DMatrix::zeros(d_alpha, d_alpha),
            q_phi: DMatrix::zeros(d_phi, d_phi),
            q_cross: DMatrix::zeros(d_alpha, d_phi),
        }
    }

    pub fn d_alpha(&self) -> usize {
        self.r_alpha.len()
    }

    pub fn d_phi(&self) -> usize {
        self.r_phi.len()
    }

    /// The dense `(alpha, phi)` natural parameters of this site.
    pub fn to_joint(&self) -> NaturalGaussian {
        let (da, dp) = (self.d_alpha(), self.d_phi());
        let mut r = DVector::zeros(da + dp);
        r.rows_mut(0, da).copy_from(&self.r_alpha);
        r.rows_mut(da, dp).copy_from(&self.r_phi);
        let mut q = DMatrix::zeros(da + dp, da + dp);
        q.view_mut((0, 0), (da, da)).copy_from(&self.q_alpha);
        q.view_mut((da, da), (dp, dp)).copy_from(&self.q_phi);
        q.view_mut((0, da), (da, dp)).copy_from(&self.q_cross);
        q.view_mut((da, 0), (dp, da))
            .copy_from(&self.q_cross.transpose());
        symmetrize(&mut q);
        NaturalGaussian::new(r, q).expect("block assembly is symmetric")
    }

    /// Partition dense joint natural parameters back into blocks.
    pub fn from_joint(nat: &NaturalGaussian, d_alpha: usize) -> Self {
        let d_phi = nat.dim() - d_alpha;
        Self {
            r_alpha: nat.r().rows(0, d_alpha).clone_owned(),
            r_phi: nat.r().rows(d_alpha, d_phi).clone_owned(),
            q_alpha: nat.q().view((0, 0), (d_alpha, d_alpha)).clone_owned(),
            q_phi: nat.q().view((d_alpha, d_alpha), (d_phi, d_phi)).clone_owned(),
            q_cross: nat.q().view((0, d_alpha), (d_alpha, d_phi)).clone_owned(),
        }
    }
}

/// Pending update for one block site.
#[derive(Debug, Clone)]
pub struct HierDelta {
    pub r_alpha: DVector<f64>,
    pub r_phi: DVector<f64>,
    pub q_alpha: DMatrix<f64>,
    pub q_phi: DMatrix<f64>,
    pub q_cross: DMatrix<f64>,
}

impl HierDelta {
    pub fn zero(d_alpha: usize, d_phi: usize) -> Self {
        Self {
            r_alpha: DVector::zeros(d_alpha),
            r_phi: DVector::zeros(d_phi),
            q_alpha: DMatrix::zeros(d_alpha, d_alpha),
            q_phi: DMatrix::zeros(d_phi, d_phi),
            q_cross: DMatrix::zeros(d_alpha, d_phi),
        }
    }

    pub fn r_inf(&self) -> f64 {
        self.r_alpha.amax().max(self.r_phi.amax())
    }

    pub fn q_inf(&self) -> f64 {
        self.q_alpha
            .amax()
            .max(self.q_phi.amax())
            .max(self.q_cross.amax())
    }
}

/// Independent Gaussian priors: `(a_0, A_0)` for every `alpha_k` and
/// `(b_0, B_0)` for `phi`.
#[derive(Debug, Clone)]
pub struct HierPriors {
    pub alpha: NaturalGaussian,
    pub phi: NaturalGaussian,
}

impl HierPriors {
    pub fn new(alpha: NaturalGaussian, phi: NaturalGaussian) -> Result<Self> {
        if !is_pd(alpha.q()) {
            return Err(Error::NotPositiveDefinite {
                what: "alpha prior precision".into(),
            });
        }
        if !is_pd(phi.q()) {
            return Err(Error::NotPositiveDefinite {
                what: "phi prior precision".into(),
            });
        }
        Ok(Self { alpha, phi })
    }
}

/// One site's contribution to the `phi` marginal:
/// `b_tilde = b_k - C_k'(A_k + A_0)^-1 (a_k + a_0)` and
/// `B_tilde = B_k - C_k'(A_k + A_0)^-1 C_k`.
pub fn site_phi_contribution(
    site: &HierSite,
    priors: &HierPriors,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let a_tot = &site.q_alpha + priors.alpha.q();
    let chol = Cholesky::new(a_tot).ok_or_else(|| Error::NotPositiveDefinite {
        what: "site alpha precision A_k + A_0".into(),
    })?;
    let loc = &site.r_alpha + priors.alpha.r();
    let b = &site.r_phi - site.q_cross.transpose() * chol.solve(&loc);
    let mut bb = &site.q_phi - site.q_cross.transpose() * chol.solve(&site.q_cross);
    symmetrize(&mut bb);
    Ok((b, bb))
}

/// Natural parameters of the `phi` marginal `g(phi)` assembled from all
/// sites and the priors, without ever forming the joint over all `alpha`.
pub fn phi_marginal(sites: &[HierSite], priors: &HierPriors) -> Result<NaturalGaussian> {
    let d_phi = priors.phi.dim();
    let mut b = priors.phi.r().clone();
    let mut bb = priors.phi.q().clone();
    for (k, site) in sites.iter().enumerate() {
        let (cb, cbb) = site_phi_contribution(site, priors).map_err(|e| match e {
            Error::NotPositiveDefinite { what } => Error::NotPositiveDefinite {
                what: format!("{what} (site {k})"),
            },
            other => other,
        })?;
        b += cb;
        bb += cbb;
    }
    symmetrize(&mut bb);
    let _ = d_phi;
    NaturalGaussian::new(b, bb)
}

/// Cavity of site `k`: the alpha block is exactly the alpha prior, the phi
/// block subtracts the site's contribution from the `phi` marginal.
pub fn hier_cavity(
    sites: &[HierSite],
    priors: &HierPriors,
    k: usize,
) -> Result<(NaturalGaussian, NaturalGaussian)> {
    let full = phi_marginal(sites, priors)?;
    let (cb, cbb) = site_phi_contribution(&sites[k], priors).map_err(|e| match e {
        Error::NotPositiveDefinite { what } => Error::NotPositiveDefinite {
            what: format!("{what} (site {k})"),
        },
        other => other,
    })?;
    let phi_cavity = NaturalGaussian::new(full.r() - cb, full.q() - cbb)?;
    Ok((priors.alpha.clone(), phi_cavity))
}

/// Marginal moments of `alpha_k` from its site, the priors, and the phi
/// cavity, integrating `phi` out in closed form:
/// `Sigma = (A_0 + A_k - C (B_cav + B_k)^-1 C')^-1`.
pub fn alpha_marginal(
    site: &HierSite,
    priors: &HierPriors,
    phi_cavity: &NaturalGaussian,
) -> Result<MomentGaussian> {
    let s = phi_cavity.q() + &site.q_phi;
    let chol = Cholesky::new(s).ok_or_else(|| Error::NotPositiveDefinite {
        what: "phi block B_cav + B_k".into(),
    })?;
    let mut prec = priors.alpha.q() + &site.q_alpha
        - &site.q_cross * chol.solve(&site.q_cross.transpose());
    symmetrize(&mut prec);
    let loc = priors.alpha.r() + &site.r_alpha
        - &site.q_cross * chol.solve(&(phi_cavity.r() + &site.r_phi));
    NaturalGaussian::new(loc, prec)?.to_moments()
}

/// The joint `(alpha, phi)` cavity of the explicit-block route: block-diagonal
/// product of the alpha prior and the phi cavity.
pub fn joint_cavity(alpha_cavity: &NaturalGaussian, phi_cavity: &NaturalGaussian) -> NaturalGaussian {
    let (da, dp) = (alpha_cavity.dim(), phi_cavity.dim());
    let mut r = DVector::zeros(da + dp);
    r.rows_mut(0, da).copy_from(alpha_cavity.r());
    r.rows_mut(da, dp).copy_from(phi_cavity.r());
    let mut q = DMatrix::zeros(da + dp, da + dp);
    q.view_mut((0, 0), (da, da)).copy_from(alpha_cavity.q());
    q.view_mut((da, da), (dp, dp)).copy_from(phi_cavity.q());
    NaturalGaussian::new(r, q).expect("block-diagonal assembly is symmetric")
}

/// Treat a hierarchical shard as a plain joint-parameter shard: the engine
/// cavity then covers the full `(alpha_k, phi)` vector.
struct JointView<'a>(&'a dyn ShardModel);

impl ShardModel for JointView<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn local_dim(&self) -> usize {
        0
    }

    fn log_lik(&self, u: &DVector<f64>) -> f64 {
        self.0.log_lik(u)
    }

    fn grad(&self, u: &DVector<f64>) -> DVector<f64> {
        self.0.grad(u)
    }

    fn hess(&self, u: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.0.hess(u)
    }

    fn data_len(&self) -> usize {
        self.0.data_len()
    }

    fn shared_names(&self) -> Vec<String> {
        self.0.shared_names()
    }
}

/// Result of one explicit-block tilted update.
pub struct HierTiltedUpdate {
    pub delta: HierDelta,
    /// `log Z_tilted`; `None` when the update was discarded.
    pub log_z: Option<f64>,
    /// Draws behind the update, for reuse and local reporting.
    pub cache: Option<CachedDraws>,
}

/// Approximate the joint tilted distribution
/// `p(y_k | alpha_k, phi)^eta g(alpha_k | a_0, A_0) g(phi | b_cav, B_cav)`
/// with the given backend and turn its block-partitioned natural parameters
/// into site deltas (`delta_a = a_tilted - a_0 - a_k`, ...,
/// `delta_C = C_tilted - C_k`). A nonpositive normalizer or an indefinite
/// tilted precision discards the update.
pub fn hier_tilted_update(
    shard: &dyn ShardModel,
    priors: &HierPriors,
    phi_cavity: &NaturalGaussian,
    site: &HierSite,
    backend: &dyn TiltedBackend,
    eta: f64,
    ctx: &TiltedContext<'_>,
) -> Result<HierTiltedUpdate> {
    let (da, dp) = (site.d_alpha(), site.d_phi());
    let cav = joint_cavity(&priors.alpha, phi_cavity);
    let view = JointView(shard);
    let tm = backend.tilted(&view, &cav, eta, ctx)?;
    let nat = match &tm.nat {
        Some(n) => n.clone(),
        None => MomentGaussian::new(tm.mean.clone(), tm.cov.clone())?.to_natural()?,
    };
    if !tm.log_z.is_finite() || !is_pd(nat.q()) {
        return Ok(HierTiltedUpdate {
            delta: HierDelta::zero(da, dp),
            log_z: None,
            cache: None,
        });
    }
    let tilted = HierSite::from_joint(&nat, da);
    let delta = HierDelta {
        r_alpha: &tilted.r_alpha - priors.alpha.r() - &site.r_alpha,
        r_phi: &tilted.r_phi - phi_cavity.r() - &site.r_phi,
        q_alpha: &tilted.q_alpha - priors.alpha.q() - &site.q_alpha,
        q_phi: &tilted.q_phi - phi_cavity.q() - &site.q_phi,
        q_cross: &tilted.q_cross - &site.q_cross,
    };
    let cache = tm.draws.as_ref().map(|d| CachedDraws {
        draws: d.clone(),
        cavity: cav.clone(),
        eta,
        log_z: tm.log_z,
    });
    Ok(HierTiltedUpdate {
        delta,
        log_z: Some(tm.log_z),
        cache,
    })
}

/// Outcome of the explicit-block run.
#[derive(Debug)]
pub struct HierOutcome {
    /// Converged `phi` marginal in natural parameters.
    pub phi: NaturalGaussian,
    /// Per-site `alpha_k` posterior marginals.
    pub alpha_marginals: Vec<MomentGaussian>,
    pub sites: Vec<HierSite>,
    pub trace: RunTrace,
    pub converged: bool,
    pub iters: usize,
}

/// The explicit-block parallel algorithm: damped site refresh with a PD
/// check on every `A_k + A_0`, central `phi` assembly, per-site cavities
/// with a PD check on every `B_cav` (both checks back off the damping and
/// clamp after ten rejections), then joint tilted updates per site.
pub fn hier_run(
    shards: &[&dyn ShardModel],
    priors: &HierPriors,
    cfg: &EpConfig,
    backend: &dyn TiltedBackend,
) -> Result<HierOutcome> {
    cfg.validate()?;
    let k = shards.len();
    if k == 0 {
        return Err(Error::InvalidConfig("need at least one shard".into()));
    }
    let dp = priors.phi.dim();
    let d_alphas: Vec<usize> = shards.iter().map(|s| s.dim() - dp).collect();
    for (i, s) in shards.iter().enumerate() {
        if s.dim() <= dp {
            return Err(Error::DimensionMismatch {
                left: s.dim(),
                right: dp,
                context: "shard joint vs phi prior",
            });
        }
        if priors.alpha.dim() != d_alphas[i] {
            return Err(Error::DimensionMismatch {
                left: priors.alpha.dim(),
                right: d_alphas[i],
                context: "alpha prior vs shard local block",
            });
        }
    }

    let mut sites: Vec<HierSite> = d_alphas.iter().map(|&da| HierSite::zero(da, dp)).collect();
    let mut deltas: Vec<HierDelta> = d_alphas.iter().map(|&da| HierDelta::zero(da, dp)).collect();
    let mut caches: Vec<Option<CachedDraws>> = vec![None; k];
    let mut trace = RunTrace::default();
    let mut converged = false;
    let mut iters = 0;

    for iter in 0..cfg.max_iters {
        iters = iter + 1;
        let t0 = Instant::now();

        // Steps 1-4: damped refresh guarded on every A_k + A_0 and B_cav.
        let mut delta_used = cfg.delta0;
        let mut rejects = 0usize;
        let mut clamped: Vec<usize> = Vec::new();
        let (new_sites, phi_cavities) = loop {
            let force = rejects >= 9;
            let trial: Vec<HierSite> = sites
                .iter()
                .zip(deltas.iter())
                .map(|(s, dl)| HierSite {
                    r_alpha: &s.r_alpha + &dl.r_alpha * delta_used,
                    r_phi: &s.r_phi + &dl.r_phi * delta_used,
                    q_alpha: &s.q_alpha + &dl.q_alpha * delta_used,
                    q_phi: &s.q_phi + &dl.q_phi * delta_used,
                    q_cross: &s.q_cross + &dl.q_cross * delta_used,
                })
                .collect();
            let alpha_ok = trial
                .iter()
                .all(|s| is_pd(&(&s.q_alpha + priors.alpha.q())));
            if alpha_ok {
                if let Ok(full) = phi_marginal(&trial, priors) {
                    if is_pd(full.q()) {
                        let mut cavities = Vec::with_capacity(k);
                        let mut all_ok = true;
                        for (i, s) in trial.iter().enumerate() {
                            let (cb, cbb) = site_phi_contribution(s, priors)?;
                            let qc = full.q() - cbb;
                            if is_pd(&qc) {
                                cavities.push(NaturalGaussian::new(full.r() - cb, qc)?);
                            } else if force {
                                let qfixed = clamp_eigenvalues(&qc, cfg.pd_floor);
                                cavities.push(NaturalGaussian::new(full.r() - cb, qfixed)?);
                                clamped.push(i);
                            } else {
                                all_ok = false;
                                break;
                            }
                        }
                        if all_ok {
                            break (trial, cavities);
                        }
                    } else if force {
                        return Err(Error::NotPositiveDefinite {
                            what: "phi marginal after clamp fallback".into(),
                        });
                    }
                } else if force {
                    return Err(Error::NotPositiveDefinite {
                        what: "site alpha precision after clamp fallback".into(),
                    });
                }
            }
            rejects += 1;
            delta_used *= cfg.delta_backoff;
        };
        sites = new_sites;
        trace.events.push(IterEvent {
            iter,
            accepted_pd_ok: true,
            clamped_sites: clamped,
            clamped_global: false,
        });

        // Step 5: joint tilted updates, site-parallel.
        let results: Result<Vec<HierTiltedUpdate>> = (0..k)
            .into_par_iter()
            .map(|i| {
                let ctx = TiltedContext {
                    site: i,
                    iter,
                    seed: derive_seed(cfg.seed, i as u64, iter as u64),
                    pd_floor: cfg.pd_floor,
                    prev: caches[i].as_ref(),
                };
                hier_tilted_update(
                    shards[i],
                    priors,
                    &phi_cavities[i],
                    &sites[i],
                    backend,
                    cfg.eta,
                    &ctx,
                )
            })
            .collect();
        let results = results?;

        let mut max_d = 0.0f64;
        for (i, upd) in results.into_iter().enumerate() {
            max_d = max_d.max(upd.delta.r_inf()).max(upd.delta.q_inf());
            if upd.cache.is_some() {
                caches[i] = upd.cache;
            }
            let dr_inf = upd.delta.r_inf();
            let dq_inf = upd.delta.q_inf();
            deltas[i] = upd.delta;
            trace.rows.push(TraceRow {
                iter,
                site: i,
                dr_inf,
                dq_inf,
                delta_used,
                pd_rejects: rejects,
                logml: f64::NAN,
                ms: 0.0,
            });
        }
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        let row_lo = trace.rows.len() - k;
        for row in &mut trace.rows[row_lo..] {
            row.ms = ms;
        }
        if max_d < cfg.conv_tol {
            converged = true;
            break;
        }
    }

    let phi = phi_marginal(&sites, priors)?;
    let alpha_marginals = (0..sites.len())
        .map(|i| {
            let (_, phi_cav) = hier_cavity(&sites, priors, i)?;
            alpha_marginal(&sites[i], priors, &phi_cav)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(HierOutcome {
        phi,
        alpha_marginals,
        sites,
        trace,
        converged,
        iters,
    })
}

/// The shared-parameter-only route: ordinary engine run over `phi` sites
/// where each shard carries its local block and every tilted computation
/// samples or optimizes the joint and returns only the `phi` marginal.
/// Local-parameter draws stay in each site's `last_tilted` for reporting.
pub fn marginal_mode_run(
    shards: &[&dyn ShardModel],
    phi_prior: &NaturalGaussian,
    cfg: &EpConfig,
    backend: &dyn TiltedBackend,
) -> Result<RunOutcome> {
    let d = phi_prior.dim();
    for s in shards {
        if s.shared_dim() != d {
            return Err(Error::DimensionMismatch {
                left: s.shared_dim(),
                right: d,
                context: "shard shared block vs phi prior",
            });
        }
    }
    let (global, sites) = engine::init_sites(shards.len(), d, cfg, phi_prior)?;
    engine::run(global, sites, cfg, backend, shards)
}

/// Mean and standard deviation of each local coordinate from a site's last
/// joint tilted approximation.
pub fn local_summary(outcome: &RunOutcome, site: usize, local_dim: usize) -> Option<(DVector<f64>, DVector<f64>)> {
    let tm = outcome.sites.get(site)?.last_tilted.as_ref()?;
    if tm.mean.len() < local_dim {
        return None;
    }
    let mean = tm.mean.rows(0, local_dim).clone_owned();
    let sd = DVector::from_fn(local_dim, |i, _| tm.cov[(i, i)].sqrt());
    Some((mean, sd))
}

/// Per-observation inner site in `(alpha, phi)` space: a transform pair
/// `(u, v)` with `z = u' alpha + v' phi` and the inner-EP site parameters
/// `(r_tilde, Q_tilde)` in z-space.
#[derive(Debug, Clone)]
pub struct InnerObs {
    /// `d_alpha x d_z`.
    pub u: DMatrix<f64>,
    /// `d_phi x d_z`.
    pub v: DMatrix<f64>,
    pub r_tilde: DVector<f64>,
    pub q_tilde: DMatrix<f64>,
}

impl InnerObs {
    /// Scalar-z observation.
    pub fn scalar(u: DVector<f64>, v: DVector<f64>, r_tilde: f64, q_tilde: f64) -> Self {
        Self {
            u: DMatrix::from_column_slice(u.len(), 1, u.as_slice()),
            v: DMatrix::from_column_slice(v.len(), 1, v.as_slice()),
            r_tilde: DVector::from_element(1, r_tilde),
            q_tilde: DMatrix::from_element(1, 1, q_tilde),
        }
    }
}

/// Closed-form outer site from inner-EP site parameters:
/// `a_k = sum_j u_j r_tilde_j`, `A_k = sum_j u_j Q_tilde_j u_j'`,
/// `C_k = sum_j u_j Q_tilde_j v_j'`, and likewise for the phi blocks.
pub fn outer_from_inner(obs: &[InnerObs]) -> Result<HierSite> {
    let first = obs.first().ok_or_else(|| Error::InvalidConfig(
        "outer_from_inner needs at least one observation".into(),
    ))?;
    let da = first.u.nrows();
    let dp = first.v.nrows();
    let mut site = HierSite::zero(da, dp);
    for o in obs {
        if o.u.nrows() != da || o.v.nrows() != dp {
            return Err(Error::DimensionMismatch {
                left: o.u.nrows(),
                right: da,
                context: "inner observation blocks",
            });
        }
        let dz = o.u.ncols();
        if o.v.ncols() != dz || o.r_tilde.len() != dz || o.q_tilde.nrows() != dz {
            return Err(Error::DimensionMismatch {
                left: o.v.ncols(),
                right: dz,
                context: "inner observation z-dimension",
            });
        }
        site.r_alpha += &o.u * &o.r_tilde;
        site.r_phi += &o.v * &o.r_tilde;
        site.q_alpha += &o.u * &o.q_tilde * o.u.transpose();
        site.q_phi += &o.v * &o.q_tilde * o.v.transpose();
        site.q_cross += &o.u * &o.q_tilde * o.v.transpose();
    }
    symmetrize(&mut site.q_alpha);
    symmetrize(&mut site.q_phi);
    Ok(site)
}

/// A GLM-style observation row for the inner-EP route: 1-d `z` along
/// `direction` in `(alpha, phi)` space with a pointwise likelihood.
pub struct InnerRow {
    pub direction: DVector<f64>,
    pub lik: Lik1d,
}

/// Run inner EP (dimension-reduced, one site per observation) against the
/// joint cavity and assemble the outer block site in closed form. Returns
/// the site together with the tilted log-normalizer of the whole shard.
pub fn outer_site_via_inner_ep(
    rows: &[InnerRow],
    alpha_cavity: &NaturalGaussian,
    phi_cavity: &NaturalGaussian,
    cfg: &EpConfig,
    quad_nodes: usize,
) -> Result<(HierSite, f64)> {
    let cav = joint_cavity(alpha_cavity, phi_cavity);
    let da = alpha_cavity.dim();
    let sites: Vec<LowRankSite> = rows
        .iter()
        .map(|r| {
            LowRankSite::zero(DMatrix::from_column_slice(
                r.direction.len(),
                1,
                r.direction.as_slice(),
            ))
        })
        .collect();
    let terms: Vec<SiteTerm> = rows.iter().map(|r| SiteTerm::OneD(r.lik.clone())).collect();
    let plan = BatchPlan::single(rows.len());
    let out = lr_run(sites, &terms, &plan, &cav, cfg, quad_nodes)?;
    let log_z = lr_log_marginal_likelihood(&out)?;
    let obs: Vec<InnerObs> = out
        .sites
        .iter()
        .map(|s| InnerObs {
            u: s.u.view((0, 0), (da, 1)).clone_owned(),
            v: s.u.view((da, 0), (s.u.nrows() - da, 1)).clone_owned(),
            r_tilde: s.r.clone(),
            q_tilde: s.q.clone(),
        })
        .collect();
    let site = outer_from_inner(&obs)?;
    Ok((site, log_z))
}

/// Draw local parameters conditional on sampled shared parameters: for each
/// row of `phi_draws` and each shard, run a short Metropolis chain over the
/// local block at that fixed `phi` and keep its final state. Outputs one
/// coherent local draw per (phi draw, shard).
pub fn conditional_local_inference(
    phi_draws: &DMatrix<f64>,
    shards: &[&dyn ShardModel],
    sc: &SamplerConfig,
) -> Result<Vec<DMatrix<f64>>> {
    use rand::SeedableRng;
    use rand_distr::Distribution;

    let mut out = Vec::with_capacity(shards.len());
    for (k, shard) in shards.iter().enumerate() {
        let local = shard.local_dim();
        let dphi = shard.shared_dim();
        if phi_draws.ncols() != dphi {
            return Err(Error::DimensionMismatch {
                left: phi_draws.ncols(),
                right: dphi,
                context: "phi draws vs shard shared block",
            });
        }
        let draws: Result<Vec<DVector<f64>>> = (0..phi_draws.nrows())
            .into_par_iter()
            .map(|s| {
                let phi = phi_draws.row(s).transpose();
                let mut u = DVector::zeros(shard.dim());
                u.rows_mut(local, dphi).copy_from(&phi);
                let target = |alpha: &DVector<f64>| {
                    let mut full = u.clone();
                    full.rows_mut(0, local).copy_from(alpha);
                    shard.log_lik(&full)
                };
                let mut rng =
                    rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(sc.seed, k as u64, s as u64));
                let mut alpha = DVector::zeros(local);
                let mut lp = target(&alpha);
                if !lp.is_finite() {
                    return Err(Error::ChainDiverged(
                        "non-finite local conditional at start".into(),
                    ));
                }
                let mut log_s = sc.proposal_scale.ln();
                let total = sc.n_warmup + sc.n_draws;
                for t in 0..total {
                    let z = DVector::from_fn(local, |_, _| {
                        let v: f64 = rand_distr::StandardNormal.sample(&mut rng);
                        v
                    });
                    let prop = &alpha + z * log_s.exp();
                    let lp_prop = target(&prop);
                    let log_ratio = lp_prop - lp;
                    let acc_prob = if lp_prop.is_finite() {
                        log_ratio.exp().min(1.0)
                    } else {
                        0.0
                    };
                    if lp_prop.is_finite() && rand::Rng::random::<f64>(&mut rng).ln() < log_ratio {
                        alpha = prop;
                        lp = lp_prop;
                    }
                    if t < sc.n_warmup {
                        let gamma = ((t + 1) as f64).powf(-0.6);
                        log_s += gamma * (acc_prob - sc.adapt_target);
                    }
                }
                Ok(alpha)
            })
            .collect();
        let draws = draws?;
        let mut m = DMatrix::zeros(phi_draws.nrows(), local);
        for (s, a) in draws.into_iter().enumerate() {
            m.row_mut(s).copy_from(&a.transpose());
        }
        out.push(m);
    }
    Ok(out)
}
