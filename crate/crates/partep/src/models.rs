//! Model shards and experiment data.
//!
//! A shard owns one partition's observations and exposes its log likelihood
//! with derivatives. For hierarchical models the parameter vector of a shard
//! is `u = (alpha_k, phi)` with the local block first; the engine only ever
//! sees the shared block, the local block lives and dies inside each tilted
//! computation.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::natgauss::{symmetrize, NaturalGaussian};

/// One partition's log-likelihood with derivatives.
///
/// `dim` is the length of the full parameter vector `u`; the leading
/// `local_dim` coordinates are partition-local parameters that the engine
/// marginalizes out of every tilted approximation, the trailing
/// `dim - local_dim` coordinates are the shared parameters the sites live on.
pub trait ShardModel: Send + Sync {
    fn dim(&self) -> usize;

    fn local_dim(&self) -> usize {
        0
    }

    fn shared_dim(&self) -> usize {
        self.dim() - self.local_dim()
    }

    /// Log of the shard's factor (likelihood, plus any local prior folded in).
    fn log_lik(&self, u: &DVector<f64>) -> f64;

    fn grad(&self, u: &DVector<f64>) -> DVector<f64>;

    /// Analytic Hessian when available; backends fall back to central
    /// differences of the gradient otherwise.
    fn hess(&self, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// Number of observations held by the shard.
    fn data_len(&self) -> usize;

    /// Names for the shared coordinates, used in summaries.
    fn shared_names(&self) -> Vec<String> {
        (0..self.shared_dim()).map(|i| format!("theta_{}", i + 1)).collect()
    }
}

/// Central finite-difference gradient with step `1e-5 * (1 + |u_i|)`.
pub fn fd_grad(f: &dyn Fn(&DVector<f64>) -> f64, u: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(u.len());
    for i in 0..u.len() {
        let h = 1e-5 * (1.0 + u[i].abs());
        let mut up = u.clone();
        let mut dn = u.clone();
        up[i] += h;
        dn[i] -= h;
        g[i] = (f(&up) - f(&dn)) / (2.0 * h);
    }
    g
}

/// Central finite-difference Hessian from a gradient function, symmetrized.
pub fn fd_hess_from_grad(
    grad: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    u: &DVector<f64>,
) -> DMatrix<f64> {
    let d = u.len();
    let mut h = DMatrix::zeros(d, d);
    for i in 0..d {
        let step = 1e-5 * (1.0 + u[i].abs());
        let mut up = u.clone();
        let mut dn = u.clone();
        up[i] += step;
        dn[i] -= step;
        let col = (grad(&up) - grad(&dn)) / (2.0 * step);
        h.set_column(i, &col);
    }
    symmetrize(&mut h);
    h
}

/// Result of the derivative self-test.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_grad_rel: f64,
    pub max_hess_rel: f64,
}

/// Compare analytic derivatives against central finite differences at
/// `n_points` random points near the origin.
pub fn check_gradients(shard: &dyn ShardModel, n_points: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = shard.dim();
    let mut worst_g: f64 = 0.0;
    let mut worst_h: f64 = 0.0;
    for _ in 0..n_points {
        let u = DVector::from_fn(d, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.5 * z
        });
        let ga = shard.grad(&u);
        let gf = fd_grad(&|x| shard.log_lik(x), &u);
        let scale = ga.amax().max(1.0);
        worst_g = worst_g.max((ga - gf).amax() / scale);
        if let Some(ha) = shard.hess(&u) {
            let hf = fd_hess_from_grad(&|x| shard.grad(x), &u);
            let hscale = ha.amax().max(1.0);
            worst_h = worst_h.max((ha - hf).amax() / hscale);
        }
    }
    GradCheck {
        max_grad_rel: worst_g,
        max_hess_rel: worst_h,
    }
}

fn softplus(s: f64) -> f64 {
    if s > 30.0 {
        s
    } else if s < -30.0 {
        s.exp()
    } else {
        (1.0 + s.exp()).ln()
    }
}

/// Numerically stable inverse logit.
pub fn inv_logit(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Linear-Gaussian shards (conjugate oracles)
// ---------------------------------------------------------------------------

/// A shard with Gaussian likelihood `y ~ N(X u, noise_var I)`, optionally
/// carrying a Gaussian prior on the leading local block folded into the
/// factor. The log likelihood is quadratic in `u`, so every tilted
/// computation is exact; these shards anchor the exactness tests.
#[derive(Debug, Clone)]
pub struct LinearGaussianShard {
    pub design: DMatrix<f64>,
    pub y: DVector<f64>,
    pub noise_var: f64,
    local_dim: usize,
    /// Normalized Gaussian prior on the local block `(mu0, sigma0)`; folded
    /// into `log_lik` together with its constant.
    local_prior: Option<(DVector<f64>, DMatrix<f64>)>,
    // cached natural-parameter form of the likelihood
    q_lik: DMatrix<f64>,
    r_lik: DVector<f64>,
    c_lik: f64,
}

impl LinearGaussianShard {
    pub fn new(design: DMatrix<f64>, y: DVector<f64>, noise_var: f64) -> Self {
        Self::with_local(design, y, noise_var, 0, None)
    }

    pub fn with_local(
        design: DMatrix<f64>,
        y: DVector<f64>,
        noise_var: f64,
        local_dim: usize,
        local_prior: Option<(DVector<f64>, DMatrix<f64>)>,
    ) -> Self {
        let n = design.nrows() as f64;
        let mut q_lik = design.transpose() * &design / noise_var;
        symmetrize(&mut q_lik);
        let r_lik = design.transpose() * &y / noise_var;
        let c_lik = -0.5 * y.dot(&y) / noise_var
            - 0.5 * n * ((2.0 * std::f64::consts::PI * noise_var).ln());
        Self {
            design,
            y,
            noise_var,
            local_dim,
            local_prior,
            q_lik,
            r_lik,
            c_lik,
        }
    }

    /// Natural parameters `(r, Q)` and constant `c` of the likelihood factor:
    /// `log p(y|u) = -1/2 u'Qu + r'u + c` (local prior excluded).
    pub fn likelihood_natural(&self) -> (DVector<f64>, DMatrix<f64>, f64) {
        (self.r_lik.clone(), self.q_lik.clone(), self.c_lik)
    }

    fn prior_terms(&self, u: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        match &self.local_prior {
            None => (0.0, DVector::zeros(d), DMatrix::zeros(d, d)),
            Some((mu0, sigma0)) => {
                let m = self.local_dim;
                let chol = Cholesky::new(sigma0.clone()).expect("local prior covariance is PD");
                let alpha = u.rows(0, m).clone_owned();
                let diff = &alpha - mu0;
                let sol = chol.solve(&diff);
                let logdet: f64 =
                    chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
                let ll = -0.5 * diff.dot(&sol)
                    - 0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + logdet);
                let mut g = DVector::zeros(d);
                g.rows_mut(0, m).copy_from(&(-&sol));
                let mut h = DMatrix::zeros(d, d);
                let prec = chol.inverse();
                h.view_mut((0, 0), (m, m)).copy_from(&(-&prec));
                (ll, g, h)
            }
        }
    }
}

impl ShardModel for LinearGaussianShard {
    fn dim(&self) -> usize {
        self.design.ncols()
    }

    fn local_dim(&self) -> usize {
        self.local_dim
    }

    fn log_lik(&self, u: &DVector<f64>) -> f64 {
        let quad = -0.5 * (&self.q_lik * u).dot(u) + self.r_lik.dot(u) + self.c_lik;
        quad + self.prior_terms(u).0
    }

    fn grad(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.r_lik - &self.q_lik * u + self.prior_terms(u).1
    }

    fn hess(&self, u: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(-&self.q_lik + self.prior_terms(u).2)
    }

    fn data_len(&self) -> usize {
        self.y.len()
    }
}

/// A conjugate model instance: shards plus the exact posterior and evidence.
pub struct ConjugateModel {
    pub shards: Vec<LinearGaussianShard>,
    pub prior: NaturalGaussian,
    pub exact_posterior: NaturalGaussian,
    pub exact_log_evidence: f64,
}

/// Random Gaussian-likelihood shards `y_k ~ N(A_k theta, V_k)` with the exact
/// posterior and log evidence computed by one dense solve.
pub fn conjugate_gaussian_model(k: usize, d: usize, seed: u64) -> ConjugateModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta_star = DVector::from_fn(d, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z
    });
    let prior = NaturalGaussian::new(DVector::zeros(d), DMatrix::identity(d, d) * 0.5)
        .expect("prior construction");

    let mut shards = Vec::with_capacity(k);
    let mut q_sum = prior.q().clone();
    let mut r_sum = prior.r().clone();
    let mut c_sum = 0.0;
    for _ in 0..k {
        let n = d + 1 + (rng.random::<u32>() % 3) as usize;
        let a = DMatrix::from_fn(n, d, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        let noise_var = 0.5 + rng.random::<f64>();
        let noise = DVector::from_fn(n, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * noise_var.sqrt()
        });
        let y = &a * &theta_star + noise;
        let shard = LinearGaussianShard::new(a, y, noise_var);
        let (r_lik, q_lik, c_lik) = shard.likelihood_natural();
        q_sum += q_lik;
        r_sum += r_lik;
        c_sum += c_lik;
        shards.push(shard);
    }
    symmetrize(&mut q_sum);
    let exact_posterior = NaturalGaussian::new(r_sum, q_sum).expect("posterior construction");
    let exact_log_evidence = c_sum + exact_posterior.log_norm().expect("posterior PD")
        - prior.log_norm().expect("prior PD");
    ConjugateModel {
        shards,
        prior,
        exact_posterior,
        exact_log_evidence,
    }
}

// ---------------------------------------------------------------------------
// Plain logistic regression shard (no hierarchy)
// ---------------------------------------------------------------------------

/// Logistic regression likelihood over the full parameter vector:
/// `y_i ~ Bernoulli(inv_logit(x_i' theta))`.
#[derive(Debug, Clone)]
pub struct LogisticShard {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl LogisticShard {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Self {
        assert_eq!(x.nrows(), y.len());
        Self { x, y }
    }
}

impl ShardModel for LogisticShard {
    fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn log_lik(&self, u: &DVector<f64>) -> f64 {
        let s = &self.x * u;
        (0..self.y.len())
            .map(|i| self.y[i] * s[i] - softplus(s[i]))
            .sum()
    }

    fn grad(&self, u: &DVector<f64>) -> DVector<f64> {
        let s = &self.x * u;
        let resid = DVector::from_fn(self.y.len(), |i, _| self.y[i] - inv_logit(s[i]));
        self.x.transpose() * resid
    }

    fn hess(&self, u: &DVector<f64>) -> Option<DMatrix<f64>> {
        let s = &self.x * u;
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        for i in 0..self.y.len() {
            let p = inv_logit(s[i]);
            let v = p * (1.0 - p);
            let xi = self.x.row(i).transpose();
            h.ger(-v, &xi, &xi, 1.0);
        }
        symmetrize(&mut h);
        Some(h)
    }

    fn data_len(&self) -> usize {
        self.y.len()
    }
}

// ---------------------------------------------------------------------------
// Hierarchical logistic regression (simulator + shards)
// ---------------------------------------------------------------------------

/// True generating parameters retained for coverage checks.
#[derive(Debug, Clone)]
pub struct HLogitTruth {
    pub beta: DVector<f64>,
    pub alpha: DVector<f64>,
    pub tau: f64,
}

/// One observation row: group id (0-based), binary outcome, predictor row.
#[derive(Debug, Clone)]
pub struct HLogitRow {
    pub group: usize,
    pub y: u8,
    pub x: DVector<f64>,
}

/// Simulated hierarchical logistic regression data.
#[derive(Debug, Clone)]
pub struct HLogitDataset {
    pub j: usize,
    pub d: usize,
    pub rows: Vec<HLogitRow>,
    pub truth: Option<HLogitTruth>,
}

/// Overrides for the simulator's generating parameters.
#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    pub beta: Option<DVector<f64>>,
    pub tau: Option<f64>,
}

/// Simulate `y_ij ~ Bernoulli(inv_logit(alpha_j + beta' x_ij))` with
/// `x ~ N(0,1)`, `alpha_j ~ N(0, tau^2)` (tau = 2 unless overridden) and
/// `beta ~ N(0,1)` unless overridden. Deterministic under `seed`.
pub fn simulate_hlogit_with(
    j: usize,
    n_j: usize,
    d: usize,
    seed: u64,
    opts: &SimOptions,
) -> HLogitDataset {
    assert!(j >= 1 && n_j >= 1 && d >= 1, "positive sizes required");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let beta = match &opts.beta {
        Some(b) => {
            assert_eq!(b.len(), d);
            // keep the stream layout fixed regardless of overrides
            for _ in 0..d {
                std(&mut rng);
            }
            b.clone()
        }
        None => DVector::from_fn(d, |_, _| std(&mut rng)),
    };
    let tau = opts.tau.unwrap_or(2.0);
    let alpha = DVector::from_fn(j, |_, _| tau * std(&mut rng));

    let mut rows = Vec::with_capacity(j * n_j);
    for g in 0..j {
        for _ in 0..n_j {
            let x = DVector::from_fn(d, |_, _| std(&mut rng));
            let p = inv_logit(alpha[g] + beta.dot(&x));
            let y = u8::from(rng.random::<f64>() < p);
            rows.push(HLogitRow { group: g, y, x });
        }
    }
    HLogitDataset {
        j,
        d,
        rows,
        truth: Some(HLogitTruth { beta, alpha, tau }),
    }
}

/// Paper-style simulation with default generating distributions.
pub fn simulate_hlogit(j: usize, n_j: usize, d: usize, seed: u64) -> HLogitDataset {
    simulate_hlogit_with(j, n_j, d, seed, &SimOptions::default())
}

/// One partition of a hierarchical logistic regression.
///
/// Parameters are `u = (alpha_g for local groups, beta_1..beta_D, log tau)`;
/// the factor is the Bernoulli-logit likelihood of the shard's rows times the
/// local intercept priors `N(alpha_g | 0, tau^2)`.
#[derive(Debug, Clone)]
pub struct HLogitShard {
    /// Global ids of the groups owned by this shard, in order.
    pub groups: Vec<usize>,
    x: DMatrix<f64>,
    y: DVector<f64>,
    /// Local (within-shard) group index per observation.
    obs_group: Vec<usize>,
    d: usize,
    include_local_prior: bool,
}

impl HLogitShard {
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    fn split(&self, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>, f64) {
        let m = self.n_groups();
        let alpha = u.rows(0, m).clone_owned();
        let beta = u.rows(m, self.d).clone_owned();
        let w = u[m + self.d];
        (alpha, beta, w)
    }
}

impl ShardModel for HLogitShard {
    fn dim(&self) -> usize {
        self.n_groups() + self.d + 1
    }

    fn local_dim(&self) -> usize {
        self.n_groups()
    }

    fn log_lik(&self, u: &DVector<f64>) -> f64 {
        let (alpha, beta, w) = self.split(u);
        let mut ll = 0.0;
        let lin = &self.x * &beta;
        for i in 0..self.y.len() {
            let s = alpha[self.obs_group[i]] + lin[i];
            ll += self.y[i] * s - softplus(s);
        }
        if self.include_local_prior {
            let e2 = (-2.0 * w).exp();
            for g in 0..self.n_groups() {
                ll += -0.5 * (2.0 * std::f64::consts::PI).ln() - w - 0.5 * alpha[g] * alpha[g] * e2;
            }
        }
        ll
    }

    fn grad(&self, u: &DVector<f64>) -> DVector<f64> {
        let (alpha, beta, w) = self.split(u);
        let m = self.n_groups();
        let mut g = DVector::zeros(self.dim());
        let lin = &self.x * &beta;
        for i in 0..self.y.len() {
            let gi = self.obs_group[i];
            let s = alpha[gi] + lin[i];
            let resid = self.y[i] - inv_logit(s);
            g[gi] += resid;
            for c in 0..self.d {
                g[m + c] += resid * self.x[(i, c)];
            }
        }
        if self.include_local_prior {
            let e2 = (-2.0 * w).exp();
            for gi in 0..m {
                g[gi] += -alpha[gi] * e2;
                g[m + self.d] += -1.0 + alpha[gi] * alpha[gi] * e2;
            }
        }
        g
    }

    fn hess(&self, u: &DVector<f64>) -> Option<DMatrix<f64>> {
        let (alpha, beta, w) = self.split(u);
        let m = self.n_groups();
        let dim = self.dim();
        let mut h = DMatrix::zeros(dim, dim);
        let lin = &self.x * &beta;
        for i in 0..self.y.len() {
            let gi = self.obs_group[i];
            let s = alpha[gi] + lin[i];
            let p = inv_logit(s);
            let v = p * (1.0 - p);
            h[(gi, gi)] -= v;
            for c in 0..self.d {
                let xc = self.x[(i, c)];
                h[(gi, m + c)] -= v * xc;
                h[(m + c, gi)] -= v * xc;
                for c2 in 0..self.d {
                    h[(m + c, m + c2)] -= v * xc * self.x[(i, c2)];
                }
            }
        }
        if self.include_local_prior {
            let e2 = (-2.0 * w).exp();
            let wi = m + self.d;
            for gi in 0..m {
                h[(gi, gi)] -= e2;
                h[(gi, wi)] += 2.0 * alpha[gi] * e2;
                h[(wi, gi)] += 2.0 * alpha[gi] * e2;
                h[(wi, wi)] -= 2.0 * alpha[gi] * alpha[gi] * e2;
            }
        }
        symmetrize(&mut h);
        Some(h)
    }

    fn data_len(&self) -> usize {
        self.y.len()
    }

    fn shared_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.d).map(|i| format!("beta_{i}")).collect();
        names.push("log_tau".into());
        names
    }
}

/// Partition a dataset into shards of `groups_per_shard` consecutive groups.
/// A group never spans two shards; the final shard may hold fewer groups.
pub fn hlogit_shards(ds: &HLogitDataset, groups_per_shard: usize) -> Result<Vec<HLogitShard>> {
    hlogit_shards_opts(ds, groups_per_shard, true)
}

/// As [`hlogit_shards`], with control over folding the local intercept prior
/// into the shard factor (the explicit-block algorithms supply it separately).
pub fn hlogit_shards_opts(
    ds: &HLogitDataset,
    groups_per_shard: usize,
    include_local_prior: bool,
) -> Result<Vec<HLogitShard>> {
    if groups_per_shard == 0 || groups_per_shard > ds.j {
        return Err(Error::InvalidPartition(format!(
            "groups_per_shard {} outside 1..={}",
            groups_per_shard, ds.j
        )));
    }
    for row in &ds.rows {
        if row.group >= ds.j {
            return Err(Error::InvalidPartition(format!(
                "row group id {} outside 0..{}",
                row.group, ds.j
            )));
        }
    }
    let k = ds.j.div_ceil(groups_per_shard);
    let mut shards = Vec::with_capacity(k);
    for s in 0..k {
        let lo = s * groups_per_shard;
        let hi = ((s + 1) * groups_per_shard).min(ds.j);
        let groups: Vec<usize> = (lo..hi).collect();
        let rows: Vec<&HLogitRow> = ds.rows.iter().filter(|r| r.group >= lo && r.group < hi).collect();
        let n = rows.len();
        let mut x = DMatrix::zeros(n, ds.d);
        let mut y = DVector::zeros(n);
        let mut obs_group = Vec::with_capacity(n);
        for (i, row) in rows.iter().enumerate() {
            x.row_mut(i).copy_from(&row.x.transpose());
            y[i] = row.y as f64;
            obs_group.push(row.group - lo);
        }
        shards.push(HLogitShard {
            groups,
            x,
            y,
            obs_group,
            d: ds.d,
            include_local_prior,
        });
    }
    Ok(shards)
}

// ---------------------------------------------------------------------------
// Conjugate hierarchical model (explicit-block oracle)
// ---------------------------------------------------------------------------

/// A linear-Gaussian hierarchical instance with the dense-joint posterior.
pub struct ConjugateHierModel {
    /// Shard factors `log p(y_k | alpha_k, phi)`, local prior excluded.
    pub shards: Vec<LinearGaussianShard>,
    /// Natural parameters of the fixed local prior `(a0, A0)`.
    pub alpha_prior: NaturalGaussian,
    /// Natural parameters of the shared prior `(b0, B0)`.
    pub phi_prior: NaturalGaussian,
    pub d_alpha: usize,
    pub d_phi: usize,
    /// Exact posterior marginal of `phi`.
    pub exact_phi: NaturalGaussian,
    /// Exact posterior marginals of each `alpha_k` (moments).
    pub exact_alpha: Vec<(DVector<f64>, DMatrix<f64>)>,
}

/// Build `y_kj = u' alpha_k + v' phi + noise` shards with independent
/// Gaussian priors, plus dense-joint exact marginals.
pub fn conjugate_hier_model(
    k: usize,
    d_alpha: usize,
    d_phi: usize,
    n_per: usize,
    seed: u64,
) -> ConjugateHierModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let noise_var: f64 = 0.8;

    let alpha_prior = NaturalGaussian::new(
        DVector::from_element(d_alpha, 0.1),
        DMatrix::identity(d_alpha, d_alpha) * 0.7,
    )
    .unwrap();
    let phi_prior = NaturalGaussian::new(
        DVector::from_element(d_phi, -0.2),
        DMatrix::identity(d_phi, d_phi) * 0.4,
    )
    .unwrap();

    let phi_star = DVector::from_fn(d_phi, |_, _| std(&mut rng));
    let mut shards = Vec::with_capacity(k);
    for _ in 0..k {
        let alpha_star = DVector::from_fn(d_alpha, |_, _| std(&mut rng));
        let design = DMatrix::from_fn(n_per, d_alpha + d_phi, |_, _| std(&mut rng));
        let mut y = DVector::zeros(n_per);
        for i in 0..n_per {
            let row = design.row(i);
            let mean = row.columns(0, d_alpha).transpose().dot(&alpha_star)
                + row.columns(d_alpha, d_phi).transpose().dot(&phi_star);
            y[i] = mean + noise_var.sqrt() * std(&mut rng);
        }
        shards.push(LinearGaussianShard::with_local(
            design, y, noise_var, d_alpha, None,
        ));
    }

    // Dense joint precision over (alpha_1, ..., alpha_K, phi).
    let total = k * d_alpha + d_phi;
    let mut q = DMatrix::zeros(total, total);
    let mut r = DVector::zeros(total);
    for (i, shard) in shards.iter().enumerate() {
        let (r_lik, q_lik, _) = shard.likelihood_natural();
        let off = i * d_alpha;
        let phi_off = k * d_alpha;
        // alpha block
        q.view_mut((off, off), (d_alpha, d_alpha))
            .iter_mut()
            .zip(q_lik.view((0, 0), (d_alpha, d_alpha)).iter())
            .for_each(|(a, b)| *a += b);
        // phi block
        q.view_mut((phi_off, phi_off), (d_phi, d_phi))
            .iter_mut()
            .zip(q_lik.view((d_alpha, d_alpha), (d_phi, d_phi)).iter())
            .for_each(|(a, b)| *a += b);
        // cross blocks
        q.view_mut((off, phi_off), (d_alpha, d_phi))
            .iter_mut()
            .zip(q_lik.view((0, d_alpha), (d_alpha, d_phi)).iter())
            .for_each(|(a, b)| *a += b);
        q.view_mut((phi_off, off), (d_phi, d_alpha))
            .iter_mut()
            .zip(q_lik.view((d_alpha, 0), (d_phi, d_alpha)).iter())
            .for_each(|(a, b)| *a += b);
        // priors
        q.view_mut((off, off), (d_alpha, d_alpha))
            .iter_mut()
            .zip(alpha_prior.q().iter())
            .for_each(|(a, b)| *a += b);
        r.rows_mut(off, d_alpha)
            .iter_mut()
            .zip((r_lik.rows(0, d_alpha) + alpha_prior.r()).iter())
            .for_each(|(a, b)| *a += b);
        r.rows_mut(phi_off, d_phi)
            .iter_mut()
            .zip(r_lik.rows(d_alpha, d_phi).iter())
            .for_each(|(a, b)| *a += b);
    }
    let phi_off = k * d_alpha;
    q.view_mut((phi_off, phi_off), (d_phi, d_phi))
        .iter_mut()
        .zip(phi_prior.q().iter())
        .for_each(|(a, b)| *a += b);
    r.rows_mut(phi_off, d_phi)
        .iter_mut()
        .zip(phi_prior.r().iter())
        .for_each(|(a, b)| *a += b);
    symmetrize(&mut q);

    let chol = Cholesky::new(q.clone()).expect("dense joint precision is PD");
    let mu = chol.solve(&r);
    let mut sigma = chol.inverse();
    symmetrize(&mut sigma);

    let phi_sigma = sigma.view((phi_off, phi_off), (d_phi, d_phi)).clone_owned();
    let phi_mu = mu.rows(phi_off, d_phi).clone_owned();
    let exact_phi = crate::natgauss::MomentGaussian::new(phi_mu, phi_sigma)
        .unwrap()
        .to_natural()
        .unwrap();
    let exact_alpha = (0..k)
        .map(|i| {
            let off = i * d_alpha;
            (
                mu.rows(off, d_alpha).clone_owned(),
                sigma.view((off, off), (d_alpha, d_alpha)).clone_owned(),
            )
        })
        .collect();

    ConjugateHierModel {
        shards,
        alpha_prior,
        phi_prior,
        d_alpha,
        d_phi,
        exact_phi,
        exact_alpha,
    }
}

// ---------------------------------------------------------------------------
// Coverage reporting
// ---------------------------------------------------------------------------

/// Standardized errors and coverage fractions of a posterior against truth.
#[derive(Debug, Clone)]
pub struct CoverageReport {
    /// `(mean - truth) / sd` per coordinate.
    pub standardized: Vec<f64>,
    /// Fractions of coordinates within 1, 2, and 3 posterior SDs.
    pub within: [f64; 3],
}

pub fn coverage_report(mean: &DVector<f64>, sd: &DVector<f64>, truth: &DVector<f64>) -> CoverageReport {
    assert_eq!(mean.len(), truth.len());
    assert_eq!(mean.len(), sd.len());
    let standardized: Vec<f64> = (0..mean.len())
        .map(|i| (mean[i] - truth[i]) / sd[i])
        .collect();
    let frac = |lim: f64| {
        standardized.iter().filter(|z| z.abs() <= lim).count() as f64 / standardized.len() as f64
    };
    CoverageReport {
        within: [frac(1.0), frac(2.0), frac(3.0)],
        standardized,
    }
}

// ---------------------------------------------------------------------------
// Dataset CSV import/export
// ---------------------------------------------------------------------------

/// Write the dataset as `group,y,x1..xD` with 1-based group ids.
pub fn write_dataset_csv(ds: &HLogitDataset, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "group,y")?;
    for i in 1..=ds.d {
        write!(f, ",x{i}")?;
    }
    writeln!(f)?;
    for row in &ds.rows {
        write!(f, "{},{}", row.group + 1, row.y)?;
        for v in row.x.iter() {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    Ok(())
}

/// Write the truth sidecar as `param,value`.
pub fn write_truth_csv(truth: &HLogitTruth, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "param,value")?;
    for (i, b) in truth.beta.iter().enumerate() {
        writeln!(f, "beta_{},{}", i + 1, b)?;
    }
    writeln!(f, "tau,{}", truth.tau)?;
    for (i, a) in truth.alpha.iter().enumerate() {
        writeln!(f, "alpha_{},{}", i + 1, a)?;
    }
    Ok(())
}

fn parse_err(path: &std::path::Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Read a dataset written by [`write_dataset_csv`].
pub fn read_dataset_csv(path: &std::path::Path) -> Result<HLogitDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "group" || cols[1] != "y" {
        return Err(parse_err(path, 1, "expected header group,y,x1..xD"));
    }
    let d = cols.len() - 2;
    let mut rows = Vec::new();
    let mut max_group = 0usize;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != d + 2 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {} fields, found {}", d + 2, parts.len()),
            ));
        }
        let group: usize = parts[0]
            .parse()
            .map_err(|e| parse_err(path, lineno, format!("bad group id: {e}")))?;
        if group == 0 {
            return Err(parse_err(path, lineno, "group ids are 1-based"));
        }
        let y: u8 = parts[1]
            .parse()
            .map_err(|e| parse_err(path, lineno, format!("bad outcome: {e}")))?;
        if y > 1 {
            return Err(parse_err(path, lineno, "outcome must be 0 or 1"));
        }
        let mut x = DVector::zeros(d);
        for (i, p) in parts[2..].iter().enumerate() {
            x[i] = p
                .parse()
                .map_err(|e| parse_err(path, lineno, format!("bad predictor: {e}")))?;
        }
        max_group = max_group.max(group);
        rows.push(HLogitRow {
            group: group - 1,
            y,
            x,
        });
    }
    Ok(HLogitDataset {
        j: max_group,
        d,
        rows,
        truth: None,
    })
}

/// Read a truth sidecar written by [`write_truth_csv`].
pub fn read_truth_csv(path: &std::path::Path) -> Result<HLogitTruth> {
    let text = std::fs::read_to_string(path)?;
    let mut beta = Vec::new();
    let mut alpha = Vec::new();
    let mut tau = None;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if lineno == 1 {
            if line.trim() != "param,value" {
                return Err(parse_err(path, 1, "expected header param,value"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (name, value) = line
            .split_once(',')
            .ok_or_else(|| parse_err(path, lineno, "expected param,value"))?;
        let v: f64 = value
            .parse()
            .map_err(|e| parse_err(path, lineno, format!("bad value: {e}")))?;
        if let Some(i) = name.strip_prefix("beta_") {
            let i: usize = i
                .parse()
                .map_err(|e| parse_err(path, lineno, format!("bad beta index: {e}")))?;
            if beta.len() < i {
                beta.resize(i, 0.0);
            }
            beta[i - 1] = v;
        } else if let Some(i) = name.strip_prefix("alpha_") {
            let i: usize = i
                .parse()
                .map_err(|e| parse_err(path, lineno, format!("bad alpha index: {e}")))?;
            if alpha.len() < i {
                alpha.resize(i, 0.0);
            }
            alpha[i - 1] = v;
        } else if name == "tau" {
            tau = Some(v);
        } else {
            return Err(parse_err(path, lineno, format!("unknown param {name}")));
        }
    }
    Ok(HLogitTruth {
        beta: DVector::from_vec(beta),
        alpha: DVector::from_vec(alpha),
        tau: tau.ok_or_else(|| parse_err(path, 1, "missing tau"))?,
    })
}
