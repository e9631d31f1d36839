//! Observation-noise adaptation and minibatch down-weighting.
//!
//! `R` follows an exponential moving average of per-batch residual
//! statistics. Each batch's residual is scored by its Mahalanobis distance
//! under the previous `R`, and that distance sets a regulation factor
//! `λ = exp(−α·d_M)` that shrinks the update of anomalous batches.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::belief::{floor_diagonal, spd_solve, symmetrize, Covariance};
use crate::error::{dims, invalid, Error, Result};

/// How the per-batch noise contribution R̂ is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RhatMethod {
    /// R̂ = r·rᵀ
    ZerothOrder,
    /// R̂ = r·rᵀ + H·Σ·Hᵀ
    FirstOrder,
}

impl fmt::Display for RhatMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RhatMethod::ZerothOrder => f.write_str("ZerothOrder"),
            RhatMethod::FirstOrder => f.write_str("FirstOrder"),
        }
    }
}

impl FromStr for RhatMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zerothorder" | "zeroth" | "method1" | "1" => Ok(RhatMethod::ZerothOrder),
            "firstorder" | "first" | "method2" | "2" => Ok(RhatMethod::FirstOrder),
            other => Err(invalid(format!("unknown rhat method `{other}`"))),
        }
    }
}

/// Which parts of the update the regulation factor scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LambdaScope {
    /// Mean update and the EMA term only.
    Alg1,
    /// Mean, covariance contraction and the EMA term.
    TextIVD,
}

impl LambdaScope {
    /// Factor applied to the covariance contraction K·H·Σ.
    pub fn cov_scale(self, lam: f64) -> f64 {
        match self {
            LambdaScope::Alg1 => 1.0,
            LambdaScope::TextIVD => lam,
        }
    }
}

impl fmt::Display for LambdaScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaScope::Alg1 => f.write_str("Alg1"),
            LambdaScope::TextIVD => f.write_str("TextIVD"),
        }
    }
}

impl FromStr for LambdaScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alg1" => Ok(LambdaScope::Alg1),
            "textivd" => Ok(LambdaScope::TextIVD),
            other => Err(invalid(format!("unknown lambda scope `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustConfig {
    pub alpha: f64,
    pub lambda_scope: LambdaScope,
}

impl RobustConfig {
    pub fn new(alpha: f64, lambda_scope: LambdaScope) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(invalid(format!("alpha must be >= 0, got {alpha}")));
        }
        Ok(Self { alpha, lambda_scope })
    }
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            lambda_scope: LambdaScope::Alg1,
        }
    }
}

/// Observation-noise covariance and the settings of its moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseState {
    r: DMatrix<f64>,
    beta: f64,
    epsilon: f64,
    method: RhatMethod,
}

impl NoiseState {
    /// R₀ = ε·I of side `m`.
    pub fn new(m: usize, beta: f64, epsilon: f64, method: RhatMethod) -> Result<Self> {
        Self::with_initial(m, epsilon, beta, epsilon, method)
    }

    /// R₀ = r0·I, floored at ε·I.
    pub fn with_initial(m: usize, r0: f64, beta: f64, epsilon: f64, method: RhatMethod) -> Result<Self> {
        if m == 0 {
            return Err(invalid("noise dimension m must be >= 1"));
        }
        if !(r0 > 0.0) || !r0.is_finite() {
            return Err(invalid(format!("initial noise scale must be > 0, got {r0}")));
        }
        Self::from_parts(DMatrix::identity(m, m) * r0.max(epsilon), beta, epsilon, method)
    }

    /// Restores a state from an explicit `R`; checks every invariant.
    pub fn from_parts(r: DMatrix<f64>, beta: f64, epsilon: f64, method: RhatMethod) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(invalid(format!("beta must lie in (0, 1), got {beta}")));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(invalid(format!("epsilon must be > 0, got {epsilon}")));
        }
        if r.nrows() != r.ncols() || r.is_empty() {
            return Err(dims(format!("R must be square and non-empty, got {:?}", r.shape())));
        }
        // PD check; spd_solve also verifies symmetry.
        spd_solve(&r, &DMatrix::identity(r.nrows(), r.nrows()))?;
        Ok(Self {
            r,
            beta,
            epsilon,
            method,
        })
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn method(&self) -> RhatMethod {
        self.method
    }
}

/// r = y − ŷ.
pub fn residual(y: &DVector<f64>, yhat: &DVector<f64>) -> Result<DVector<f64>> {
    if y.len() != yhat.len() {
        return Err(dims(format!(
            "target length {} vs output length {}",
            y.len(),
            yhat.len()
        )));
    }
    Ok(y - yhat)
}

pub fn rhat_method1(r: &DVector<f64>) -> DMatrix<f64> {
    r * r.transpose()
}

/// r·rᵀ + H·Σ·Hᵀ.
pub fn rhat_method2(r: &DVector<f64>, h: &DMatrix<f64>, prior_cov: &Covariance) -> Result<DMatrix<f64>> {
    let hsh = projected_cov(h, prior_cov)?;
    if hsh.nrows() != r.len() {
        return Err(dims(format!("residual length {} vs H rows {}", r.len(), h.nrows())));
    }
    Ok(rhat_method1(r) + hsh)
}

/// H·Σ·Hᵀ, symmetrized. Shared between R̂ and the innovation matrix.
pub fn projected_cov(h: &DMatrix<f64>, cov: &Covariance) -> Result<DMatrix<f64>> {
    if h.ncols() != cov.dim() {
        return Err(dims(format!(
            "H has {} columns, covariance side {}",
            h.ncols(),
            cov.dim()
        )));
    }
    let mut out = h * cov.mul_transpose(h);
    symmetrize(&mut out);
    Ok(out)
}

/// √(rᵀ R⁻¹ r).
pub fn mahalanobis(r: &DVector<f64>, r_prev: &DMatrix<f64>) -> Result<f64> {
    if r_prev.nrows() != r.len() {
        return Err(dims(format!(
            "residual length {} vs R side {}",
            r.len(),
            r_prev.nrows()
        )));
    }
    let rhs = DMatrix::from_column_slice(r.len(), 1, r.as_slice());
    let x = spd_solve(r_prev, &rhs)?;
    let q = r.dot(&x.column(0));
    Ok(q.max(0.0).sqrt())
}

/// λ = exp(−α·d_M).
pub fn regulation(d_m: f64, alpha: f64) -> Result<f64> {
    if !(d_m >= 0.0) || !(alpha >= 0.0) {
        return Err(invalid(format!(
            "regulation needs d_M >= 0 and alpha >= 0, got d_M={d_m}, alpha={alpha}"
        )));
    }
    Ok((-alpha * d_m).exp())
}

/// R ← β·R + λ(1−β)·R̂, symmetrized and floored at ε·I.
pub fn ema_update(state: &NoiseState, rhat: &DMatrix<f64>, lam: f64) -> Result<NoiseState> {
    if !(lam > 0.0 && lam <= 1.0) {
        return Err(invalid(format!("lambda must lie in (0, 1], got {lam}")));
    }
    if rhat.shape() != state.r.shape() {
        return Err(dims(format!("R̂ is {:?}, R is {:?}", rhat.shape(), state.r.shape())));
    }
    let mut r = &state.r * state.beta + rhat * (lam * (1.0 - state.beta));
    symmetrize(&mut r);
    floor_psd(&mut r, state.epsilon);
    Ok(NoiseState { r, ..state.clone() })
}

/// Enforces R ⪰ ε·I.
///
/// β·R_prev with R_prev ⪰ ε·I and a PSD R̂ is only guaranteed to be ⪰ β·ε·I,
/// so a diagonal clamp alone is not enough; the smallest eigenvalue is
/// lifted to ε by adding the deficit to the diagonal.
fn floor_psd(r: &mut DMatrix<f64>, epsilon: f64) {
    floor_diagonal(r, epsilon);
    let min_eig = r.clone().symmetric_eigenvalues().min();
    if min_eig < epsilon {
        for i in 0..r.nrows() {
            r[(i, i)] += epsilon - min_eig;
        }
    }
}
