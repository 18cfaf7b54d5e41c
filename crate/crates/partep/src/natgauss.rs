//! Multivariate Gaussians in natural parameterization and their exact algebra.
//!
//! A density `g(theta | r, Q) = exp(-1/2 theta' Q theta + r' theta)` is stored
//! through its location parameter `r` and precision `Q`. Products and
//! quotients of Gaussians are sums and differences of these parameters, which
//! is why every message in the crate uses this form. Moments are computed on
//! demand. `Q` is allowed to be indefinite (cavity intermediates can be), so
//! positive definiteness is checked explicitly where an operation needs it.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative tolerance for the symmetry invariant on stored matrices.
pub const SYM_TOL: f64 = 1e-12;

const LN_2PI: f64 = 1.8378770664093453;

/// Max relative asymmetry |M - M'| / max(1, |M|_inf).
fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 1.0;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
            scale = scale.max(m[(i, j)].abs().max(m[(j, i)].abs()));
        }
        scale = scale.max(m[(i, i)].abs());
    }
    worst / scale.max(1.0)
}

/// Replace `m` by `(m + m')/2`, removing round-off drift.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// True iff a zero-jitter Cholesky factorization of `q` succeeds.
pub fn is_pd(q: &DMatrix<f64>) -> bool {
    Cholesky::new(q.clone()).is_some()
}

/// Eigenvalue clamping: decompose `Q = V L V'`, floor the eigenvalues, and
/// recompose. Eigenvectors are preserved; an input whose smallest eigenvalue
/// already reaches the floor is returned unchanged.
pub fn clamp_eigenvalues(q: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    assert!(floor > 0.0, "eigenvalue floor must be positive");
    let eig = SymmetricEigen::new(q.clone());
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return q.clone();
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

/// A multivariate Gaussian `g(theta | r, Q)` in natural parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalGaussian {
    r: DVector<f64>,
    q: DMatrix<f64>,
    /// Result of the last explicit positive-definiteness check, if any.
    pd: Option<bool>,
}

impl NaturalGaussian {
    /// Build from a location vector and a symmetric precision matrix.
    /// The precision may be indefinite; only symmetry and shape are enforced.
    pub fn new(r: DVector<f64>, q: DMatrix<f64>) -> Result<Self> {
        if q.nrows() != q.ncols() {
            return Err(Error::DimensionMismatch {
                left: q.nrows(),
                right: q.ncols(),
                context: "precision matrix shape",
            });
        }
        if r.len() != q.nrows() {
            return Err(Error::DimensionMismatch {
                left: r.len(),
                right: q.nrows(),
                context: "location vs precision",
            });
        }
        let asym = asymmetry(&q);
        if asym > SYM_TOL {
            return Err(Error::NotSymmetric { max_rel: asym });
        }
        Ok(Self { r, q, pd: None })
    }

    /// The multiplicative unit: `r = 0`, `Q = 0`.
    pub fn unit(d: usize) -> Self {
        Self {
            r: DVector::zeros(d),
            q: DMatrix::zeros(d, d),
            pd: None,
        }
    }

    /// Isotropic Gaussian with precision `q_scalar` on every coordinate.
    pub fn isotropic(d: usize, q_scalar: f64) -> Self {
        Self {
            r: DVector::zeros(d),
            q: DMatrix::identity(d, d) * q_scalar,
            pd: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.r.len()
    }

    pub fn r(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// Result of the last recorded PD check (`None` until one runs).
    pub fn pd_flag(&self) -> Option<bool> {
        self.pd
    }

    /// Run a Cholesky PD check and record the outcome in the validity flag.
    pub fn check_pd(&mut self) -> bool {
        let ok = is_pd(&self.q);
        self.pd = Some(ok);
        ok
    }

    /// Same as [`check_pd`](Self::check_pd), by value.
    pub fn pd_checked(mut self) -> Self {
        self.check_pd();
        self
    }

    /// Log normalizer `Psi(r, Q) = 1/2 (-log|Q/2pi| + r' Q^-1 r)`,
    /// computed through a Cholesky factorization of `Q`.
    pub fn log_norm(&self) -> Result<f64> {
        let chol = Cholesky::new(self.q.clone()).ok_or_else(|| Error::NotPositiveDefinite {
            what: "precision in log_norm".into(),
        })?;
        let logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        let x = chol.solve(&self.r);
        Ok(0.5 * (-logdet + self.dim() as f64 * LN_2PI + self.r.dot(&x)))
    }

    /// Product of densities: natural parameters add.
    pub fn multiply(&self, other: &Self) -> Result<Self> {
        self.check_same_dim(other, "multiply")?;
        Ok(Self {
            r: &self.r + &other.r,
            q: &self.q + &other.q,
            pd: None,
        })
    }

    /// Quotient of densities: natural parameters subtract. The result may be
    /// indefinite; no PD check is run here.
    pub fn divide(&self, other: &Self) -> Result<Self> {
        self.check_same_dim(other, "divide")?;
        Ok(Self {
            r: &self.r - &other.r,
            q: &self.q - &other.q,
            pd: None,
        })
    }

    /// Fractional quotient: remove `eta` times another density.
    pub fn divide_scaled(&self, other: &Self, eta: f64) -> Result<Self> {
        self.check_same_dim(other, "divide_scaled")?;
        Ok(Self {
            r: &self.r - &other.r * eta,
            q: &self.q - &other.q * eta,
            pd: None,
        })
    }

    /// Convert to mean/covariance. Requires `Q` positive definite.
    pub fn to_moments(&self) -> Result<MomentGaussian> {
        let chol = Cholesky::new(self.q.clone()).ok_or_else(|| Error::NotPositiveDefinite {
            what: "precision in to_moments".into(),
        })?;
        let mu = chol.solve(&self.r);
        let mut sigma = chol.inverse();
        symmetrize(&mut sigma);
        MomentGaussian::new(mu, sigma)
    }

    /// Density evaluated in log space (unnormalized):
    /// `-1/2 theta' Q theta + r' theta`.
    pub fn log_density_unnorm(&self, theta: &DVector<f64>) -> f64 {
        -0.5 * (self.q.clone() * theta).dot(theta) + self.r.dot(theta)
    }

    fn check_same_dim(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
                context,
            });
        }
        Ok(())
    }
}

/// A Gaussian in moment parameterization with a positive definite covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentGaussian {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
}

impl MomentGaussian {
    /// Validates symmetry, shape, and positive definiteness of `sigma`.
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        if sigma.nrows() != sigma.ncols() || mu.len() != sigma.nrows() {
            return Err(Error::DimensionMismatch {
                left: mu.len(),
                right: sigma.nrows(),
                context: "mean vs covariance",
            });
        }
        let asym = asymmetry(&sigma);
        if asym > SYM_TOL {
            return Err(Error::NotSymmetric { max_rel: asym });
        }
        if !is_pd(&sigma) {
            return Err(Error::NotPositiveDefinite {
                what: "covariance".into(),
            });
        }
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Convert to natural parameters: `Q = Sigma^-1`, `r = Sigma^-1 mu`.
    pub fn to_natural(&self) -> Result<NaturalGaussian> {
        let chol = Cholesky::new(self.sigma.clone()).ok_or_else(|| Error::NotPositiveDefinite {
            what: "covariance in to_natural".into(),
        })?;
        let r = chol.solve(&self.mu);
        let mut q = chol.inverse();
        symmetrize(&mut q);
        NaturalGaussian::new(r, q)
    }

    /// Lower Cholesky factor of the covariance.
    pub fn sigma_cholesky(&self) -> Result<DMatrix<f64>> {
        Cholesky::new(self.sigma.clone())
            .map(|c| c.l())
            .ok_or_else(|| Error::NotPositiveDefinite {
                what: "covariance".into(),
            })
    }
}

/// Conversion alias matching the natural -> moment direction.
pub fn to_moments(g: &NaturalGaussian) -> Result<MomentGaussian> {
    g.to_moments()
}

/// Conversion alias matching the moment -> natural direction.
pub fn from_moments(m: &MomentGaussian) -> Result<NaturalGaussian> {
    m.to_natural()
}

/// A weighted sample set: `S` draws of dimension `d` with nonnegative weights.
#[derive(Debug, Clone)]
pub struct WeightedDraws {
    /// S x d matrix, one draw per row.
    pub draws: DMatrix<f64>,
    pub weights: DVector<f64>,
    /// Identifier of the density the draws came from.
    pub source_id: String,
}

impl WeightedDraws {
    pub fn new(draws: DMatrix<f64>, weights: DVector<f64>, source_id: impl Into<String>) -> Result<Self> {
        if draws.nrows() != weights.len() {
            return Err(Error::DimensionMismatch {
                left: draws.nrows(),
                right: weights.len(),
                context: "draws vs weights",
            });
        }
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::DegenerateDraws("negative or non-finite weight".into()));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::AllZeroWeights);
        }
        Ok(Self {
            draws,
            weights,
            source_id: source_id.into(),
        })
    }

    /// Unweighted draws (all weights one).
    pub fn unit(draws: DMatrix<f64>, source_id: impl Into<String>) -> Self {
        let n = draws.nrows();
        Self {
            draws,
            weights: DVector::from_element(n, 1.0),
            source_id: source_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.draws.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.draws.ncols()
    }

    /// Effective sample size of the weights, `(sum w)^2 / sum w^2`.
    pub fn ess(&self) -> f64 {
        let s: f64 = self.weights.iter().sum();
        let s2: f64 = self.weights.iter().map(|w| w * w).sum();
        s * s / s2
    }
}

/// Weighted mean and covariance of a draw set, stabilized to a positive
/// definite result.
///
/// Weights are normalized; the covariance uses the `1/(1 - sum w~^2)`
/// correction, which reduces to the `n-1` denominator for equal weights.
/// The covariance is symmetrized and, if needed, jittered on the diagonal
/// with an escalating jitter (`1e-10 * trace/d` up to `1e-4 * trace/d`,
/// stepping by factors of ten) until its Cholesky succeeds.
pub fn moments_from_draws(d: &WeightedDraws) -> Result<MomentGaussian> {
    if d.is_empty() {
        return Err(Error::DegenerateDraws("empty draw set".into()));
    }
    let ess = d.ess();
    if ess < 2.0 {
        return Err(Error::DegenerateDraws(format!(
            "effective sample size {ess:.3} < 2"
        )));
    }
    let total: f64 = d.weights.iter().sum();
    let wn = &d.weights / total;

    let dim = d.dim();
    let mut mu = DVector::zeros(dim);
    for s in 0..d.len() {
        mu += d.draws.row(s).transpose() * wn[s];
    }

    let mut cov = DMatrix::zeros(dim, dim);
    for s in 0..d.len() {
        let c = d.draws.row(s).transpose() - &mu;
        cov += (&c * c.transpose()) * wn[s];
    }
    let w2: f64 = wn.iter().map(|w| w * w).sum();
    cov /= 1.0 - w2;
    symmetrize(&mut cov);

    if is_pd(&cov) {
        return MomentGaussian::new(mu, cov);
    }
    let base = cov.trace() / dim as f64;
    let mut jitter = 1e-10 * base;
    let cap = 1e-4 * base;
    while jitter <= cap && jitter > 0.0 {
        let jittered = &cov + DMatrix::<f64>::identity(dim, dim) * jitter;
        if is_pd(&jittered) {
            return MomentGaussian::new(mu, jittered);
        }
        jitter *= 10.0;
    }
    Err(Error::DegenerateDraws(
        "covariance not positive definite after jitter escalation".into(),
    ))
}
