//! Dimension-reduced sites for likelihoods that depend on `z_k = U_k' theta`.
//!
//! Each site stores natural parameters in the low-dimensional `z` space
//! together with its transform `U_k`; the global approximation accumulates
//! `sum_k U_k Q_k U_k' + Q_0` without ever materializing dense site
//! precisions. Tilted moments for one-dimensional `z` come from
//! Gauss-Hermite quadrature against the Gaussian cavity; higher-dimensional
//! sites accept a user-supplied moment callback. Site work is grouped into
//! batches mirroring a central-aggregator layout; the batch plan never
//! changes the result beyond floating-point reassociation.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::engine::{EpConfig, GlobalApprox, IterEvent, RunTrace, TraceRow};
use crate::error::{Error, Result};
use crate::natgauss::{clamp_eigenvalues, is_pd, symmetrize, MomentGaussian, NaturalGaussian};

/// A site `g(U_k' theta | r_k, Q_k)` with natural parameters in z-space.
#[derive(Debug, Clone)]
pub struct LowRankSite {
    /// d x d_z transform; `z_k = u' theta`.
    pub u: DMatrix<f64>,
    pub r: DVector<f64>,
    pub q: DMatrix<f64>,
    /// Tilted normalizer `log Z_tilted` saved at the last update.
    pub log_z: Option<f64>,
    /// Cavity correction `c_k = Psi(cavity) - Psi(marginal)` saved alongside.
    pub c_k: Option<f64>,
}

impl LowRankSite {
    pub fn zero(u: DMatrix<f64>) -> Self {
        let dz = u.ncols();
        Self {
            u,
            r: DVector::zeros(dz),
            q: DMatrix::zeros(dz, dz),
            log_z: None,
            c_k: None,
        }
    }

    pub fn dz(&self) -> usize {
        self.u.ncols()
    }

    pub fn d(&self) -> usize {
        self.u.nrows()
    }
}

/// Pending z-space update for one site.
#[derive(Debug, Clone)]
pub struct LrDelta {
    pub dr: DVector<f64>,
    pub dq: DMatrix<f64>,
}

impl LrDelta {
    pub fn zero(dz: usize) -> Self {
        Self {
            dr: DVector::zeros(dz),
            dq: DMatrix::zeros(dz, dz),
        }
    }
}

/// Assignment of site indices to batches: disjoint groups covering `0..K`.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub groups: Vec<Vec<usize>>,
}

impl BatchPlan {
    /// All sites in one batch.
    pub fn single(k: usize) -> Self {
        Self {
            groups: vec![(0..k).collect()],
        }
    }

    /// `m` contiguous batches of near-equal size.
    pub fn contiguous(k: usize, m: usize) -> Self {
        let m = m.clamp(1, k.max(1));
        let per = k.div_ceil(m);
        let groups = (0..m)
            .map(|j| ((j * per)..((j + 1) * per).min(k)).collect())
            .filter(|g: &Vec<usize>| !g.is_empty())
            .collect();
        Self { groups }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let mut seen = vec![false; k];
        for g in &self.groups {
            for &i in g {
                if i >= k {
                    return Err(Error::InvalidPartition(format!("site {i} outside 0..{k}")));
                }
                if seen[i] {
                    return Err(Error::InvalidPartition(format!("site {i} in two batches")));
                }
                seen[i] = true;
            }
        }
        if let Some(miss) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidPartition(format!("site {miss} not covered")));
        }
        Ok(())
    }
}

/// One-dimensional site likelihoods evaluable pointwise in `z`.
#[derive(Debug, Clone)]
pub enum Lik1d {
    /// `N(y | z, var)`.
    GaussianObs { y: f64, var: f64 },
    /// `Phi(y z)` with `y` in {-1, +1}.
    Probit { y: f64 },
    /// Bernoulli-logit with outcome `y` in {0, 1}.
    Logit { y: f64 },
}

impl Lik1d {
    pub fn log_lik(&self, z: f64) -> f64 {
        match self {
            Lik1d::GaussianObs { y, var } => {
                -0.5 * (y - z) * (y - z) / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
            }
            Lik1d::Probit { y } => log_std_normal_cdf(y * z),
            Lik1d::Logit { y } => {
                if *y > 0.5 {
                    -ln_1p_exp(-z)
                } else {
                    -ln_1p_exp(z)
                }
            }
        }
    }
}

fn ln_1p_exp(s: f64) -> f64 {
    if s > 30.0 {
        s
    } else if s < -30.0 {
        s.exp()
    } else {
        (1.0 + s.exp()).ln()
    }
}

/// Log of the standard normal CDF via `erfc`, stable deep into the left tail.
pub fn log_std_normal_cdf(x: f64) -> f64 {
    let arg = -x / std::f64::consts::SQRT_2;
    if arg < 25.0 {
        (0.5 * libm::erfc(arg)).ln()
    } else {
        // asymptotic expansion of log Phi(x) for very negative x
        let x2 = x * x;
        -0.5 * x2 - 0.5 * (2.0 * std::f64::consts::PI).ln() - (-x).ln() + (1.0 - 1.0 / x2).ln_1p()
    }
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Moment provider for sites whose `z` has dimension above one.
pub trait ZMomentFn: Send + Sync {
    /// Return `(log Z, mean, cov)` of the tilted distribution in z-space
    /// against the given (normalized) z-space cavity.
    fn moments(
        &self,
        cavity: &NaturalGaussian,
        eta: f64,
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>)>;
}

/// The likelihood attached to one low-rank site.
pub enum SiteTerm {
    OneD(Lik1d),
    Callback(Box<dyn ZMomentFn>),
}

/// Gauss-Hermite nodes and weights (physicists' convention: integrates
/// `f(x) exp(-x^2)`), via the symmetric tridiagonal Jacobi matrix.
pub fn gauss_hermite(n: usize) -> (DVector<f64>, DVector<f64>) {
    assert!(n >= 1);
    let mut jac = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        jac[(i - 1, i)] = b;
        jac[(i, i - 1)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let w = std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, i)].powi(2);
            (eig.eigenvalues[i], w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    (
        DVector::from_iterator(n, pairs.iter().map(|p| p.0)),
        DVector::from_iterator(n, pairs.iter().map(|p| p.1)),
    )
}

/// Tilted moments of `p(y|z)^eta N(z | cavity)` for one-dimensional `z` by
/// Gauss-Hermite quadrature. Returns `(log Z, mean, variance)` with `log Z`
/// taken against the normalized cavity.
pub fn lr_tilted_1d(
    lik: &Lik1d,
    cavity: &NaturalGaussian,
    eta: f64,
    quad_nodes: usize,
) -> Result<(f64, f64, f64)> {
    if cavity.dim() != 1 {
        return Err(Error::DimensionMismatch {
            left: cavity.dim(),
            right: 1,
            context: "1-d quadrature cavity",
        });
    }
    let qv = cavity.q()[(0, 0)];
    if qv <= 0.0 {
        return Err(Error::NotPositiveDefinite {
            what: "z-space cavity".into(),
        });
    }
    let v = 1.0 / qv;
    let m = cavity.r()[0] * v;
    let (nodes, weights) = gauss_hermite(quad_nodes);
    let scale = (2.0 * v).sqrt();
    let ln_sqrt_pi = 0.5 * std::f64::consts::PI.ln();

    let mut log_terms = Vec::with_capacity(quad_nodes);
    let mut zs = Vec::with_capacity(quad_nodes);
    for i in 0..quad_nodes {
        let z = m + scale * nodes[i];
        zs.push(z);
        log_terms.push(eta * lik.log_lik(z) + weights[i].ln() - ln_sqrt_pi);
    }
    let mx = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(Error::NonpositiveNormalizer { log_z: mx });
    }
    let sum: f64 = log_terms.iter().map(|t| (t - mx).exp()).sum();
    let log_z = mx + sum.ln();

    let mut mean = 0.0;
    for i in 0..quad_nodes {
        mean += (log_terms[i] - log_z).exp() * zs[i];
    }
    let mut var = 0.0;
    for i in 0..quad_nodes {
        let c = zs[i] - mean;
        var += (log_terms[i] - log_z).exp() * c * c;
    }
    Ok((log_z, mean, var))
}

/// Assemble the global approximation `Q = sum_k U_k Q_k U_k' + Q_0`,
/// accumulated per batch and then summed centrally in batch order.
pub fn lr_rebuild_global(
    sites: &[LowRankSite],
    prior: &NaturalGaussian,
    plan: &BatchPlan,
) -> GlobalApprox {
    let d = prior.dim();
    let batch_sums: Vec<(DVector<f64>, DMatrix<f64>)> = plan
        .groups
        .iter()
        .map(|g| {
            let mut r = DVector::zeros(d);
            let mut q = DMatrix::zeros(d, d);
            for &i in g {
                let s = &sites[i];
                r += &s.u * &s.r;
                q += &s.u * &s.q * s.u.transpose();
            }
            (r, q)
        })
        .collect();
    let mut r = prior.r().clone();
    let mut q = prior.q().clone();
    for (br, bq) in batch_sums {
        r += br;
        q += bq;
    }
    symmetrize(&mut q);
    let g = NaturalGaussian::new(r, q)
        .expect("assembled global is symmetric")
        .pd_checked();
    GlobalApprox {
        g,
        prior: prior.clone(),
    }
}

/// z-space cavity of one site, with the marginal-likelihood correction term.
#[derive(Debug, Clone)]
pub struct LrCavity {
    pub nat: NaturalGaussian,
    /// `c_k = Psi(cavity) - Psi(marginal of g in z-space)`.
    pub c_k: f64,
}

/// Cavity in z-space: with `m_k = U' mu` and `V_k = U' Sigma U`,
/// `Q_cav = V_k^-1 - eta Q_k` and `r_cav = V_k^-1 m_k - eta r_k`.
pub fn lr_cavity(
    global_moments: &MomentGaussian,
    site: &LowRankSite,
    eta: f64,
) -> Result<LrCavity> {
    let m_k = site.u.transpose() * global_moments.mu();
    let mut v_k = site.u.transpose() * global_moments.sigma() * &site.u;
    symmetrize(&mut v_k);
    let chol = Cholesky::new(v_k.clone()).ok_or_else(|| Error::NotPositiveDefinite {
        what: "z-space marginal covariance".into(),
    })?;
    let mut v_inv = chol.inverse();
    symmetrize(&mut v_inv);
    let r_marg = chol.solve(&m_k);
    let marg = NaturalGaussian::new(r_marg, v_inv)?;
    let cav = NaturalGaussian::new(
        marg.r() - site.r.clone() * eta,
        marg.q() - site.q.clone() * eta,
    )?;
    let c_k = cav.log_norm()? - marg.log_norm()?;
    Ok(LrCavity { nat: cav, c_k })
}

/// Undamped z-space site update from the moment-consistency conditions; the
/// update is discarded (zero delta, no normalizer) when the tilted normalizer
/// or covariance is unusable.
pub fn lr_site_delta(
    log_z: f64,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    cav: &NaturalGaussian,
    site: &LowRankSite,
    eta: f64,
) -> Result<(LrDelta, Option<f64>)> {
    let dz = site.dz();
    if !log_z.is_finite() || !is_pd(cov) {
        return Ok((LrDelta::zero(dz), None));
    }
    let chol = Cholesky::new(cov.clone()).expect("checked PD above");
    let mut q_til = chol.inverse();
    symmetrize(&mut q_til);
    let r_til = chol.solve(mean);
    let dq = (q_til - cav.q()) / eta - &site.q;
    let dr = (r_til - cav.r()) / eta - &site.r;
    Ok((LrDelta { dr, dq }, Some(log_z)))
}

/// Outcome of a low-rank run.
#[derive(Debug)]
pub struct LrOutcome {
    pub global: GlobalApprox,
    pub sites: Vec<LowRankSite>,
    pub trace: RunTrace,
    pub converged: bool,
    pub iters: usize,
}

/// Marginal likelihood from saved per-site quantities:
/// `sum_k (log Z_k_tilted + c_k) + Psi(r, Q) - Psi(r_0, Q_0)`.
pub fn lr_log_marginal_likelihood(outcome: &LrOutcome) -> Result<f64> {
    let missing = outcome
        .sites
        .iter()
        .filter(|s| s.log_z.is_none() || s.c_k.is_none())
        .count();
    if missing > 0 {
        return Err(Error::MissingNormalizers {
            missing,
            total: outcome.sites.len(),
        });
    }
    let sum: f64 = outcome
        .sites
        .iter()
        .map(|s| s.log_z.unwrap() + s.c_k.unwrap())
        .sum();
    let prior = &outcome.global.prior;
    let flat = prior.q().iter().all(|&v| v == 0.0) && prior.r().iter().all(|&v| v == 0.0);
    let psi_prior = if flat {
        log::warn!("flat prior: skipping Psi(r_0, Q_0) in the marginal likelihood");
        0.0
    } else {
        prior.log_norm()?
    };
    Ok(sum + outcome.global.g.log_norm()? - psi_prior)
}

/// Batched parallel EP over low-rank sites: damped site refresh, central
/// assembly with a PD check, z-space cavities with a PD check (both checks
/// back the damping off and clamp after ten rejections), then per-site
/// quadrature or callback moments and new deltas.
pub fn lr_run(
    mut sites: Vec<LowRankSite>,
    terms: &[SiteTerm],
    plan: &BatchPlan,
    prior: &NaturalGaussian,
    cfg: &EpConfig,
    quad_nodes: usize,
) -> Result<LrOutcome> {
    cfg.validate()?;
    let k = sites.len();
    if terms.len() != k {
        return Err(Error::DimensionMismatch {
            left: terms.len(),
            right: k,
            context: "terms vs sites",
        });
    }
    plan.validate(k)?;
    for s in &sites {
        if s.d() != prior.dim() {
            return Err(Error::DimensionMismatch {
                left: s.d(),
                right: prior.dim(),
                context: "site transform vs prior",
            });
        }
    }

    let mut deltas: Vec<LrDelta> = sites.iter().map(|s| LrDelta::zero(s.dz())).collect();
    let mut trace = RunTrace::default();
    let mut converged = false;
    let mut iters = 0;
    let mut global = lr_rebuild_global(&sites, prior, plan);
    if !global.g.pd_flag().unwrap_or(false) {
        return Err(Error::InvalidConfig(
            "initial low-rank global precision is not positive definite".into(),
        ));
    }

    for iter in 0..cfg.max_iters {
        iters = iter + 1;
        let t0 = Instant::now();

        // Damped refresh with PD guards on the global and every cavity.
        let mut delta_used = cfg.delta0;
        let mut rejects = 0usize;
        let mut clamped: Vec<usize> = Vec::new();
        let (new_sites, new_global, cavities) = loop {
            let trial: Vec<LowRankSite> = sites
                .iter()
                .zip(deltas.iter())
                .map(|(s, dl)| LowRankSite {
                    u: s.u.clone(),
                    r: &s.r + &dl.dr * delta_used,
                    q: &s.q + &dl.dq * delta_used,
                    log_z: s.log_z,
                    c_k: s.c_k,
                })
                .collect();
            let mut g = lr_rebuild_global(&trial, prior, plan);
            let force = rejects >= 9;
            let mut global_ok = g.g.pd_flag().unwrap_or(false);
            if !global_ok && force {
                let q = clamp_eigenvalues(g.g.q(), cfg.pd_floor);
                g.g = NaturalGaussian::new(g.g.r().clone(), q)
                    .expect("clamped global is symmetric")
                    .pd_checked();
                global_ok = true;
            }
            if global_ok {
                if let Ok(moments) = g.g.to_moments() {
                    let mut cavs: Vec<Option<LrCavity>> = Vec::with_capacity(k);
                    let mut all_ok = true;
                    for (i, s) in trial.iter().enumerate() {
                        match lr_cavity(&moments, s, cfg.eta) {
                            Ok(c) => {
                                if is_pd(c.nat.q()) {
                                    cavs.push(Some(c));
                                } else if force {
                                    let q = clamp_eigenvalues(c.nat.q(), cfg.pd_floor);
                                    let nat = NaturalGaussian::new(c.nat.r().clone(), q)?;
                                    cavs.push(Some(LrCavity { nat, c_k: c.c_k }));
                                    clamped.push(i);
                                } else {
                                    all_ok = false;
                                    break;
                                }
                            }
                            Err(e) => {
                                if force {
                                    return Err(e);
                                }
                                all_ok = false;
                                break;
                            }
                        }
                    }
                    if all_ok {
                        break (
                            trial,
                            g,
                            cavs.into_iter().map(|c| c.unwrap()).collect::<Vec<_>>(),
                        );
                    }
                }
            }
            rejects += 1;
            delta_used *= cfg.delta_backoff;
        };
        sites = new_sites;
        global = new_global;
        trace.events.push(IterEvent {
            iter,
            accepted_pd_ok: global.g.pd_flag().unwrap_or(false),
            clamped_sites: clamped,
            clamped_global: false,
        });

        // Tilted moments and new deltas, site-parallel.
        let results: Result<Vec<(LrDelta, Option<f64>)>> = (0..k)
            .into_par_iter()
            .map(|i| {
                let cav = &cavities[i];
                let (log_z, mean, cov) = match &terms[i] {
                    SiteTerm::OneD(lik) => {
                        match lr_tilted_1d(lik, &cav.nat, cfg.eta, quad_nodes) {
                            Ok((z, m, v)) => {
                                (z, DVector::from_element(1, m), DMatrix::from_element(1, 1, v))
                            }
                            Err(Error::NonpositiveNormalizer { log_z }) => (
                                log_z,
                                DVector::zeros(1),
                                DMatrix::from_element(1, 1, -1.0),
                            ),
                            Err(e) => return Err(e),
                        }
                    }
                    SiteTerm::Callback(f) => f.moments(&cav.nat, cfg.eta)?,
                };
                lr_site_delta(log_z, &mean, &cov, &cav.nat, &sites[i], cfg.eta)
            })
            .collect();
        let results = results?;

        let mut max_d = 0.0f64;
        for (i, (dl, log_z)) in results.into_iter().enumerate() {
            max_d = max_d.max(dl.dr.amax()).max(dl.dq.amax());
            if log_z.is_some() {
                sites[i].log_z = log_z;
                sites[i].c_k = Some(cavities[i].c_k);
            }
            deltas[i] = dl;
        }

        let ms = t0.elapsed().as_secs_f64() * 1e3;
        for (i, dl) in deltas.iter().enumerate() {
            trace.rows.push(TraceRow {
                iter,
                site: i,
                dr_inf: dl.dr.amax(),
                dq_inf: dl.dq.amax(),
                delta_used,
                pd_rejects: rejects,
                logml: f64::NAN,
                ms,
            });
        }
        if max_d < cfg.conv_tol {
            converged = true;
            break;
        }
    }

    Ok(LrOutcome {
        global,
        sites,
        trace,
        converged,
        iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gauss_hermite_integrates_polynomials() {
        let (x, w) = gauss_hermite(32);
        let total: f64 = w.iter().sum();
        assert_abs_diff_eq!(total, std::f64::consts::PI.sqrt(), epsilon = 1e-12);
        // int x^2 e^{-x^2} = sqrt(pi)/2
        let second: f64 = (0..32).map(|i| w[i] * x[i] * x[i]).sum();
        assert_abs_diff_eq!(second, std::f64::consts::PI.sqrt() / 2.0, epsilon = 1e-12);
        // nodes come out sorted and symmetric
        for i in 0..16 {
            assert_abs_diff_eq!(x[i], -x[31 - i], epsilon = 1e-10);
        }
    }

    fn cavity_1d(m: f64, v: f64) -> NaturalGaussian {
        NaturalGaussian::new(
            DVector::from_element(1, m / v),
            DMatrix::from_element(1, 1, 1.0 / v),
        )
        .unwrap()
    }

    #[test]
    fn quadrature_matches_gaussian_conjugacy() {
        // N(y|z, var) against N(z|m, V): closed-form posterior and evidence.
        let (y, var, m, v) = (0.7, 0.9, -0.2, 1.1);
        let lik = Lik1d::GaussianObs { y, var };
        let (log_z, mean, variance) = lr_tilted_1d(&lik, &cavity_1d(m, v), 1.0, 32).unwrap();
        assert_abs_diff_eq!(log_z, -1.468_012_123_484_645_5, epsilon = 1e-10);
        assert_abs_diff_eq!(mean, 0.295, epsilon = 1e-10);
        assert_abs_diff_eq!(variance, 0.495, epsilon = 1e-10);
    }

    /// Analytic probit tilted moments for likelihood Phi(y z) against a
    /// Gaussian cavity; the standard closed form used as an oracle.
    fn probit_analytic(y: f64, m: f64, v: f64) -> (f64, f64, f64) {
        let t = y * m / (1.0 + v).sqrt();
        let z = std_normal_cdf(t);
        let pdf = (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mean = m + y * v * pdf / (z * (1.0 + v).sqrt());
        let var = v - v * v * pdf / ((1.0 + v) * z) * (t + pdf / z);
        (z.ln(), mean, var)
    }

    #[test]
    fn quadrature_matches_analytic_probit() {
        for (y, m, v) in [(1.0, 0.3, 0.8), (-1.0, 1.2, 2.0), (1.0, -0.5, 0.25)] {
            let (lz_a, mean_a, var_a) = probit_analytic(y, m, v);
            let lik = Lik1d::Probit { y };
            let (log_z, mean, var) = lr_tilted_1d(&lik, &cavity_1d(m, v), 1.0, 32).unwrap();
            assert_abs_diff_eq!(log_z, lz_a, epsilon = 1e-8);
            assert_abs_diff_eq!(mean, mean_a, epsilon = 1e-8);
            assert_abs_diff_eq!(var, var_a, epsilon = 1e-8);
        }
        // frozen instance, cross-checked against a dense-grid oracle
        let (lz, mean, var) = probit_analytic(1.0, 0.3, 0.8);
        assert_abs_diff_eq!(lz, -0.530_232_112_230, epsilon = 1e-10);
        assert_abs_diff_eq!(mean, 0.694_260_545_697, epsilon = 1e-10);
        assert_abs_diff_eq!(var, 0.591_990_549_347, epsilon = 1e-10);
    }

    #[test]
    fn quadrature_matches_grid_on_logistic() {
        // Bernoulli-logit y = 1 against N(0.4, 1.5); values frozen from a
        // 1e6-point trapezoid grid, re-derived here with a coarser grid.
        let lik = Lik1d::Logit { y: 1.0 };
        let (log_z, mean, var) = lr_tilted_1d(&lik, &cavity_1d(0.4, 1.5), 1.0, 32).unwrap();
        assert_abs_diff_eq!(log_z, -0.550_638_065_699, epsilon = 1e-6);
        assert_abs_diff_eq!(mean, 0.891_315_715_445, epsilon = 1e-6);
        assert_abs_diff_eq!(var, 1.183_239_835_842, epsilon = 1e-6);

        let (m, v): (f64, f64) = (0.4, 1.5);
        let n = 200_001;
        let span = 12.0 * v.sqrt();
        let h = 2.0 * span / (n as f64 - 1.0);
        
        let mut acc_z = 0.0;
        let mut acc_m = 0.0;
        for i in 0..n {
            let z = m - span + h * i as f64;
            let w = (lik.log_lik(z) - 0.5 * (z - m) * (z - m) / v).exp();
            let trap = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            
            acc_m += trap * w * z;
            acc_z += trap * w;
        }
        let grid_mean = acc_m / acc_z;
        
        assert_abs_diff_eq!(mean, grid_mean, epsilon = 1e-6);
    }

    #[test]
    fn quadrature_flags_vanishing_normalizer() {
        // a likelihood that is -inf at every node
        let lik = Lik1d::Probit { y: f64::NAN };
        let out = lr_tilted_1d(&lik, &cavity_1d(0.0, 1.0), 1.0, 16);
        assert!(out.is_err() || !out.unwrap().0.is_finite());
    }

    #[test]
    fn rebuild_identity_transforms_match_dense() {
        // U_k = I: identical to the dense engine assembly.
        let prior = NaturalGaussian::new(
            DVector::from_row_slice(&[0.1, -0.2]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.8]),
        )
        .unwrap();
        let mut site_a = LowRankSite::zero(DMatrix::identity(2, 2));
        site_a.r = DVector::from_row_slice(&[0.5, 0.25]);
        site_a.q = DMatrix::from_row_slice(2, 2, &[0.5, 0.125, 0.125, 0.75]);
        let mut site_b = LowRankSite::zero(DMatrix::identity(2, 2));
        site_b.r = DVector::from_row_slice(&[-0.25, 0.5]);
        site_b.q = DMatrix::from_row_slice(2, 2, &[0.25, 0.0, 0.0, 0.5]);

        let lr = lr_rebuild_global(&[site_a.clone(), site_b.clone()], &prior, &BatchPlan::single(2));
        let dense_sites = vec![
            crate::engine::SiteState::new(0, NaturalGaussian::new(site_a.r.clone(), site_a.q.clone()).unwrap()),
            crate::engine::SiteState::new(1, NaturalGaussian::new(site_b.r.clone(), site_b.q.clone()).unwrap()),
        ];
        let dense = crate::engine::rebuild_global(&dense_sites, &prior);
        assert_eq!(lr.g.r(), dense.g.r());
        assert!((lr.g.q() - dense.g.q()).amax() < 1e-15);

        // zero sites reproduce the prior
        let zeros = vec![
            LowRankSite::zero(DMatrix::identity(2, 2)),
            LowRankSite::zero(DMatrix::identity(2, 2)),
        ];
        let g = lr_rebuild_global(&zeros, &prior, &BatchPlan::single(2));
        assert_eq!(g.g.r(), prior.r());
        assert_eq!(g.g.q(), prior.q());
    }

    #[test]
    fn rebuild_rank_one_matches_dense_and_any_batching() {
        let prior = NaturalGaussian::isotropic(3, 0.5);
        let dirs = [
            DVector::from_row_slice(&[1.0, 0.5, -0.25]),
            DVector::from_row_slice(&[0.0, 1.0, 0.5]),
            DVector::from_row_slice(&[-0.5, 0.25, 1.0]),
            DVector::from_row_slice(&[0.75, -1.0, 0.5]),
        ];
        let sites: Vec<LowRankSite> = dirs
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let mut s = LowRankSite::zero(DMatrix::from_column_slice(3, 1, u.as_slice()));
                s.r[0] = 0.25 * (i as f64 + 1.0);
                s.q[(0, 0)] = 0.5 + 0.125 * i as f64;
                s
            })
            .collect();

        // dense assembly oracle
        let mut q = prior.q().clone();
        let mut r = prior.r().clone();
        for s in &sites {
            q += &s.u * &s.q * s.u.transpose();
            r += &s.u * &s.r;
        }
        let single = lr_rebuild_global(&sites, &prior, &BatchPlan::single(4));
        assert!((single.g.q() - &q).amax() < 1e-12);
        assert!((single.g.r() - &r).amax() < 1e-12);

        // batching is a reassociation only
        for m in 1..=4 {
            let plan = BatchPlan::contiguous(4, m);
            plan.validate(4).unwrap();
            let g = lr_rebuild_global(&sites, &prior, &plan);
            assert!((g.g.q() - single.g.q()).amax() < 1e-12);
            assert!((g.g.r() - single.g.r()).amax() < 1e-12);
        }
    }

    #[test]
    fn batch_plan_validation() {
        assert!(BatchPlan { groups: vec![vec![0, 1], vec![1]] }.validate(2).is_err());
        assert!(BatchPlan { groups: vec![vec![0]] }.validate(2).is_err());
        assert!(BatchPlan { groups: vec![vec![0, 2]] }.validate(2).is_err());
        assert!(BatchPlan::contiguous(7, 3).validate(7).is_ok());
    }

    #[test]
    fn cavity_scalar_arithmetic() {
        // d_z = 1, U = e_1: plain one-dimensional marginal arithmetic.
        let mu = DVector::from_row_slice(&[0.5, -1.0]);
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let gm = MomentGaussian::new(mu, sigma).unwrap();
        let mut site = LowRankSite::zero(DMatrix::from_column_slice(2, 1, &[1.0, 0.0]));
        site.r[0] = 0.125;
        site.q[(0, 0)] = 0.25;
        let cav = lr_cavity(&gm, &site, 1.0).unwrap();
        assert_abs_diff_eq!(cav.nat.q()[(0, 0)], 1.0 / 2.0 - 0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(cav.nat.r()[0], 0.5 / 2.0 - 0.125, epsilon = 1e-14);

        // eta = 1 with a zero site: cavity equals the marginal of g.
        let zero = LowRankSite::zero(DMatrix::from_column_slice(2, 1, &[1.0, 0.0]));
        let cav = lr_cavity(&gm, &zero, 1.0).unwrap();
        assert_abs_diff_eq!(cav.nat.q()[(0, 0)], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(cav.c_k, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn cavity_equals_dense_division_when_full_rank_identity() {
        // With U = I (d_z = d) the z-space cavity is exactly the dense
        // divide; with a genuine low-rank transform it need not be.
        let prior = NaturalGaussian::isotropic(2, 0.4);
        let mut site = LowRankSite::zero(DMatrix::identity(2, 2));
        site.r = DVector::from_row_slice(&[0.3, -0.1]);
        site.q = DMatrix::from_row_slice(2, 2, &[0.6, 0.1, 0.1, 0.5]);
        let g = lr_rebuild_global(&[site.clone()], &prior, &BatchPlan::single(1));
        let gm = g.g.to_moments().unwrap();
        let cav = lr_cavity(&gm, &site, 1.0).unwrap();
        let dense = g
            .g
            .divide(&NaturalGaussian::new(site.r.clone(), site.q.clone()).unwrap())
            .unwrap();
        assert!((cav.nat.q() - dense.q()).amax() < 1e-12);
        assert!((cav.nat.r() - dense.r()).amax() < 1e-12);
    }

    #[test]
    fn site_delta_fixed_point_and_arithmetic() {
        // fixed point: tilted natural params = cavity + eta * site
        let mut site = LowRankSite::zero(DMatrix::from_column_slice(1, 1, &[1.0]));
        site.r[0] = 0.25;
        site.q[(0, 0)] = 0.5;
        let cav = NaturalGaussian::new(
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, 2.0),
        )
        .unwrap();
        let q_til = 2.5;
        let r_til = 1.25;
        let cov = DMatrix::from_element(1, 1, 1.0 / q_til);
        let mean = DVector::from_element(1, r_til / q_til);
        let (delta, logz) = lr_site_delta(-0.5, &mean, &cov, &cav, &site, 1.0).unwrap();
        assert!(delta.dq.amax() < 1e-13);
        assert!(delta.dr.amax() < 1e-13);
        assert_eq!(logz, Some(-0.5));

        // scalar case: Q_tilted = 3, Q_cav = 2, site 0.5, eta = 1 -> 0.5
        let cov = DMatrix::from_element(1, 1, 1.0 / 3.0);
        let mean = DVector::zeros(1);
        let (delta, _) = lr_site_delta(0.0, &mean, &cov, &cav, &site, 1.0).unwrap();
        assert_abs_diff_eq!(delta.dq[(0, 0)], 0.5, epsilon = 1e-12);

        // nonpositive tilted variance discards
        let bad = DMatrix::from_element(1, 1, -1.0);
        let (delta, logz) = lr_site_delta(0.0, &mean, &bad, &cav, &site, 1.0).unwrap();
        assert_eq!(delta.dq[(0, 0)], 0.0);
        assert!(logz.is_none());
    }
}
