//! Natural-gradient and Fisher-information oracles.
//!
//! These compute the same posterior as [`crate::kalman::update`] through a
//! different algebraic route (precision form plus a preconditioned gradient
//! step) so the two can be checked against each other.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::belief::{spd_solve, symmetrize, woodbury_posterior_cov, Cholesky, GaussianBelief};
use crate::error::{dims, invalid, Result};
use crate::kalman::update;
use crate::robust::LambdaScope;

/// Samples drawn per independent generator stream in [`empirical_fisher`].
pub const FISHER_CHUNK: usize = 4096;

/// Default tolerance for the dual-route comparisons.
pub const FORM_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherKind {
    GaussNewton,
    Empirical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherEstimate {
    pub matrix: DMatrix<f64>,
    pub kind: FisherKind,
    /// Number of residual samples; `None` for the closed form.
    pub sample_count: Option<usize>,
}

fn check_hr(h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    if r.nrows() != r.ncols() || h.nrows() != r.nrows() {
        return Err(dims(format!("H is {:?}, R is {:?}", h.shape(), r.shape())));
    }
    Ok(())
}

/// ∇L = Hᵀ R⁻¹ (ŷ − y) = −Hᵀ R⁻¹ r for the Gaussian loss ½ rᵀ R⁻¹ r with
/// r = y − ŷ.
pub fn loss_gradient(h: &DMatrix<f64>, r: &DMatrix<f64>, innov: &DVector<f64>) -> Result<DVector<f64>> {
    check_hr(h, r)?;
    if innov.len() != h.nrows() {
        return Err(dims(format!("residual length {} vs H rows {}", innov.len(), h.nrows())));
    }
    let rhs = DMatrix::from_column_slice(innov.len(), 1, innov.as_slice());
    let w = spd_solve(r, &rhs)?;
    Ok(-(h.transpose() * w.column(0)))
}

/// F = Hᵀ R⁻¹ H.
pub fn gauss_newton_fisher(h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<FisherEstimate> {
    check_hr(h, r)?;
    let mut f = h.transpose() * spd_solve(r, h)?;
    symmetrize(&mut f);
    Ok(FisherEstimate {
        matrix: f,
        kind: FisherKind::GaussNewton,
        sample_count: None,
    })
}

/// Average of ∇L·∇Lᵀ over the given residuals.
pub fn empirical_fisher_from_residuals<'a, I>(
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    residuals: I,
) -> Result<FisherEstimate>
where
    I: IntoIterator<Item = &'a DVector<f64>>,
{
    check_hr(h, r)?;
    let n = h.ncols();
    let mut acc = DMatrix::zeros(n, n);
    let mut count = 0usize;
    for res in residuals {
        let g = loss_gradient(h, r, res)?;
        acc.ger(1.0, &g, &g, 1.0);
        count += 1;
    }
    if count == 0 {
        return Err(invalid("empirical Fisher needs at least one residual"));
    }
    let mut matrix = acc / count as f64;
    symmetrize(&mut matrix);
    Ok(FisherEstimate {
        matrix,
        kind: FisherKind::Empirical,
        sample_count: Some(count),
    })
}

/// Monte-Carlo estimate of E[∇L·∇Lᵀ] with residuals r ~ N(0, R).
///
/// Samples are drawn as `L·z` with `L` the Cholesky factor of R. Chunk `c`
/// of [`FISHER_CHUNK`] samples uses generator stream `c` of `seed`, so the
/// result does not depend on how chunks are scheduled.
pub fn empirical_fisher(h: &DMatrix<f64>, r: &DMatrix<f64>, sample_count: usize, seed: u64) -> Result<FisherEstimate> {
    check_hr(h, r)?;
    if sample_count == 0 {
        return Err(invalid("sample_count must be >= 1"));
    }
    let m = r.nrows();
    let chol = Cholesky::new(r)?;
    // With r = L·z, ∇L = −Hᵀ R⁻¹ L z = −Hᵀ L⁻ᵀ z, so only E[z zᵀ] is needed.
    let mut second_moment = DMatrix::<f64>::zeros(m, m);
    let mut z = DVector::<f64>::zeros(m);
    let chunks = sample_count.div_ceil(FISHER_CHUNK);
    for c in 0..chunks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let take = FISHER_CHUNK.min(sample_count - c * FISHER_CHUNK);
        let mut chunk = DMatrix::<f64>::zeros(m, m);
        for _ in 0..take {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            chunk.ger(1.0, &z, &z, 1.0);
        }
        second_moment += chunk;
    }
    second_moment /= sample_count as f64;

    // Hᵀ L⁻ᵀ as the transpose of L⁻¹ H
    let mut linv_h = h.clone();
    chol.forward_in_place(&mut linv_h);
    let mut matrix = linv_h.transpose() * second_moment * linv_h;
    symmetrize(&mut matrix);
    Ok(FisherEstimate {
        matrix,
        kind: FisherKind::Empirical,
        sample_count: Some(sample_count),
    })
}

/// μ − Σ·∇L.
pub fn natural_gradient_step(mu: &DVector<f64>, post_cov: &DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>> {
    if post_cov.shape() != (mu.len(), mu.len()) || grad.len() != mu.len() {
        return Err(dims(format!(
            "mu {}, covariance {:?}, gradient {}",
            mu.len(),
            post_cov.shape(),
            grad.len()
        )));
    }
    Ok(mu - post_cov * grad)
}

/// Outcome of comparing the gain-form update with its precision-form,
/// natural-gradient restatement.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateFormReport {
    /// ‖Δ_gain − Δ_ngd‖ / max(‖Δ_gain‖, ‖Δ_ngd‖) for the mean increments.
    pub mean_deviation: f64,
    /// ‖Σ_gain − Σ_precision‖_F / ‖Σ_gain‖_F
    pub cov_deviation: f64,
    /// ‖Σ_{k|k-1}⁻¹‖_F, the prior term that separates the filter from plain NGD.
    pub prior_precision_norm: f64,
    /// ‖Hᵀ R⁻¹ H‖_F
    pub fisher_norm: f64,
    pub tolerance: f64,
}

impl UpdateFormReport {
    pub fn passed(&self) -> bool {
        self.mean_deviation <= self.tolerance && self.cov_deviation <= self.tolerance
    }
}

fn relative(diff: f64, scale: f64) -> f64 {
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Runs both update routes on one instance (λ = 1) and reports how far apart
/// they land. Numerical disagreement is reported, not raised.
pub fn verify_lemma1(
    prior: &GaussianBelief,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    innov: &DVector<f64>,
) -> Result<UpdateFormReport> {
    let gain_route = update(prior, h, innov, r, 1.0, LambdaScope::Alg1)?;
    let prior_dense = prior.cov.to_dense();
    let post_cov = woodbury_posterior_cov(&prior_dense, h, r)?;
    let grad = loss_gradient(h, r, innov)?;
    let ngd_mean = natural_gradient_step(&prior.mean, &post_cov, &grad)?;

    let d_gain = &gain_route.mean - &prior.mean;
    let d_ngd = &ngd_mean - &prior.mean;
    let mean_deviation = relative((&d_gain - &d_ngd).norm(), d_gain.norm().max(d_ngd.norm()));
    let gain_cov = gain_route.cov.to_dense();
    let cov_deviation = relative((&gain_cov - &post_cov).norm(), gain_cov.norm());

    let n = prior.dim();
    let prior_precision = spd_solve(&prior_dense, &DMatrix::identity(n, n))?;
    let fisher = gauss_newton_fisher(h, r)?;
    Ok(UpdateFormReport {
        mean_deviation,
        cov_deviation,
        prior_precision_norm: prior_precision.norm(),
        fisher_norm: fisher.matrix.norm(),
        tolerance: FORM_TOL,
    })
}

/// Relative Frobenius gap between the filter's precision increment
/// Σ_k⁻¹ − Σ_{k|k-1}⁻¹ (λ = 1 update) and the Gauss-Newton Fisher Hᵀ R⁻¹ H.
pub fn fisher_identity_deviation(prior: &GaussianBelief, h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<f64> {
    let n = prior.dim();
    let zero = DVector::zeros(h.nrows());
    let post = update(prior, h, &zero, r, 1.0, LambdaScope::Alg1)?;
    let eye = DMatrix::identity(n, n);
    let increment = spd_solve(&post.cov.to_dense(), &eye)? - spd_solve(&prior.cov.to_dense(), &eye)?;
    let fisher = gauss_newton_fisher(h, r)?.matrix;
    let scale = fisher.norm().max(f64::MIN_POSITIVE);
    Ok((increment - fisher).norm() / scale)
}
