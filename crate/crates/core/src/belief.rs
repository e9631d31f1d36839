//! Gaussian belief over the trainable parameters, plus the symmetric
//! positive-definite linear algebra the filter is built on.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{dims, invalid, Error, Result};

/// Lower clamp applied to covariance diagonals after every update.
pub const COV_FLOOR: f64 = 1e-12;

/// Relative asymmetry tolerated by [`spd_solve`] before it refuses the input.
const SYMMETRY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backend {
    Full,
    Diagonal,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backend::Full => f.write_str("Full"),
            Backend::Diagonal => f.write_str("Diagonal"),
        }
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Backend::Full),
            "diagonal" | "diag" => Ok(Backend::Diagonal),
            other => Err(invalid(format!("unknown backend `{other}`"))),
        }
    }
}

/// Parameter covariance, either dense or diagonal-only.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Full(DMatrix<f64>),
    Diagonal(DVector<f64>),
}

impl Covariance {
    pub fn backend(&self) -> Backend {
        match self {
            Covariance::Full(_) => Backend::Full,
            Covariance::Diagonal(_) => Backend::Diagonal,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Covariance::Full(m) => m.nrows(),
            Covariance::Diagonal(d) => d.len(),
        }
    }

    /// Number of scalars actually stored.
    pub fn storage_len(&self) -> usize {
        match self {
            Covariance::Full(m) => m.len(),
            Covariance::Diagonal(d) => d.len(),
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        match self {
            Covariance::Full(m) => m.diagonal(),
            Covariance::Diagonal(d) => d.clone(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Covariance::Full(m) => m.clone(),
            Covariance::Diagonal(d) => DMatrix::from_diagonal(d),
        }
    }

    /// Σ·Mᵀ for an m×n matrix `h`, returned as n×m.
    pub fn mul_transpose(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Covariance::Full(s) => s * h.transpose(),
            Covariance::Diagonal(d) => {
                let mut out = h.transpose();
                for (mut row, &di) in out.row_iter_mut().zip(d.iter()) {
                    row *= di;
                }
                out
            }
        }
    }

    /// Σ·v.
    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Covariance::Full(s) => s * v,
            Covariance::Diagonal(d) => d.component_mul(v),
        }
    }
}

/// The parameter posterior N(mean, cov) after `step` filter updates.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: Covariance,
    pub step: u64,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: Covariance, step: u64) -> Result<Self> {
        let belief = Self { mean, cov, step };
        belief.validate()?;
        Ok(belief)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn backend(&self) -> Backend {
        self.cov.backend()
    }

    /// Checks dimension agreement, symmetry and strict positivity.
    pub fn validate(&self) -> Result<()> {
        let n = self.mean.len();
        if n == 0 {
            return Err(invalid("belief dimension must be positive"));
        }
        if self.cov.dim() != n {
            return Err(dims(format!("mean has length {n}, covariance side {}", self.cov.dim())));
        }
        match &self.cov {
            Covariance::Diagonal(d) => {
                if let Some(i) = d.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
                    return Err(Error::Singular { pivot: i });
                }
            }
            Covariance::Full(s) => {
                if s.ncols() != n {
                    return Err(dims("covariance is not square"));
                }
                check_symmetric(s, 1e-10)?;
                Cholesky::new(s)?;
            }
        }
        Ok(())
    }
}

/// Isotropic process noise Q = q·I.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessNoise {
    q: f64,
}

impl ProcessNoise {
    pub fn new(q: f64) -> Result<Self> {
        if !(q >= 0.0) || !q.is_finite() {
            return Err(invalid(format!("process noise q must be >= 0, got {q}")));
        }
        Ok(Self { q })
    }

    pub fn q(&self) -> f64 {
        self.q
    }
}

/// Zero-mean isotropic prior N(0, sigma0·I).
pub fn init_belief(n: usize, sigma0: f64, backend: Backend) -> Result<GaussianBelief> {
    if n == 0 {
        return Err(invalid("parameter count n must be >= 1"));
    }
    if !(sigma0 > 0.0) || !sigma0.is_finite() {
        return Err(invalid(format!("sigma0 must be > 0, got {sigma0}")));
    }
    let cov = match backend {
        Backend::Full => Covariance::Full(DMatrix::identity(n, n) * sigma0),
        Backend::Diagonal => Covariance::Diagonal(DVector::from_element(n, sigma0)),
    };
    Ok(GaussianBelief {
        mean: DVector::zeros(n),
        cov,
        step: 0,
    })
}

/// Lower Cholesky factor A = L·Lᵀ. Failure reports the pivot where positive
/// definiteness broke down.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factorizes using the lower triangle of `a`.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(dims(format!("expected square matrix, got {}x{}", n, a.ncols())));
        }
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Singular { pivot: j });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves L·y = b in place, column by column.
    pub fn forward_in_place(&self, b: &mut DMatrix<f64>) {
        let n = self.dim();
        for c in 0..b.ncols() {
            for i in 0..n {
                let mut s = b[(i, c)];
                for k in 0..i {
                    s -= self.l[(i, k)] * b[(k, c)];
                }
                b[(i, c)] = s / self.l[(i, i)];
            }
        }
    }

    fn backward_in_place(&self, b: &mut DMatrix<f64>) {
        let n = self.dim();
        for c in 0..b.ncols() {
            for i in (0..n).rev() {
                let mut s = b[(i, c)];
                for k in (i + 1)..n {
                    s -= self.l[(k, i)] * b[(k, c)];
                }
                b[(i, c)] = s / self.l[(i, i)];
            }
        }
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.dim() {
            return Err(dims(format!("rhs has {} rows, factor side {}", b.nrows(), self.dim())));
        }
        let mut x = b.clone();
        self.forward_in_place(&mut x);
        self.backward_in_place(&mut x);
        Ok(x)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let x = self.solve(&DMatrix::from_column_slice(b.len(), 1, b.as_slice()))?;
        Ok(x.column(0).into_owned())
    }
}

fn check_symmetric(a: &DMatrix<f64>, rel_tol: f64) -> Result<()> {
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > rel_tol * scale {
                return Err(invalid(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Solves A·X = B for symmetric positive-definite A through its Cholesky
/// factor.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() {
        return Err(dims(format!("A must be square, got {}x{}", a.nrows(), a.ncols())));
    }
    if b.nrows() != a.nrows() {
        return Err(dims(format!("A is {0}x{0} but B has {1} rows", a.nrows(), b.nrows())));
    }
    check_symmetric(a, SYMMETRY_TOL)?;
    Cholesky::new(a)?.solve(b)
}

/// (M + Mᵀ)/2 in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    const TILE: usize = 64;
    let n = m.nrows();
    for bj in (0..n).step_by(TILE) {
        for bi in (bj..n).step_by(TILE) {
            for j in bj..(bj + TILE).min(n) {
                for i in bi.max(j + 1)..(bi + TILE).min(n) {
                    let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
        }
    }
}

pub fn floor_diagonal(m: &mut DMatrix<f64>, floor: f64) {
    for i in 0..m.nrows().min(m.ncols()) {
        if m[(i, i)] < floor {
            m[(i, i)] = floor;
        }
    }
}

/// Posterior covariance in precision form, (P⁻¹ + Hᵀ R⁻¹ H)⁻¹.
///
/// Works with n×n precision matrices on purpose: it is the counterpart of the
/// gain-form update and is used to cross-check it.
pub fn woodbury_posterior_cov(prior_cov: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = prior_cov.nrows();
    let m = r.nrows();
    if prior_cov.ncols() != n || r.ncols() != m || h.nrows() != m || h.ncols() != n {
        return Err(dims(format!(
            "prior {}x{}, H {}x{}, R {}x{}",
            prior_cov.nrows(),
            prior_cov.ncols(),
            h.nrows(),
            h.ncols(),
            r.nrows(),
            r.ncols()
        )));
    }
    let prior_precision = spd_solve(prior_cov, &DMatrix::identity(n, n))?;
    let rinv_h = spd_solve(r, h)?;
    let mut precision = prior_precision + h.transpose() * rinv_h;
    symmetrize(&mut precision);
    let mut post = spd_solve(&precision, &DMatrix::identity(n, n))?;
    symmetrize(&mut post);
    Ok(post)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    #[test]
    fn init_full_is_scaled_identity() {
        let b = init_belief(3, 1.0, Backend::Full).unwrap();
        assert_eq!(b.mean, DVector::zeros(3));
        assert_eq!(b.cov, Covariance::Full(DMatrix::identity(3, 3)));
        assert_eq!(b.step, 0);
    }

    #[test]
    fn init_diagonal_broadcasts_sigma() {
        let b = init_belief(2, 0.5, Backend::Diagonal).unwrap();
        assert_eq!(b.cov, Covariance::Diagonal(DVector::from_element(2, 0.5)));
        assert_eq!(b.cov.storage_len(), 2);
    }

    #[test]
    fn init_rejects_bad_arguments() {
        assert!(matches!(
            init_belief(0, 1.0, Backend::Full),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            init_belief(2, 0.0, Backend::Full),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            init_belief(2, -1.0, Backend::Diagonal),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn solve_identity_and_diagonal() {
        let x = spd_solve(&DMatrix::identity(2, 2), &dmatrix![3.0; 4.0]).unwrap();
        assert_eq!(x, dmatrix![3.0; 4.0]);

        let x = spd_solve(&dmatrix![4.0, 0.0; 0.0, 9.0], &DMatrix::identity(2, 2)).unwrap();
        assert_relative_eq!(x, dmatrix![0.25, 0.0; 0.0, 1.0 / 9.0], epsilon = 1e-15);
    }

    #[test]
    fn solve_rejects_indefinite() {
        let err = spd_solve(&dmatrix![1.0, 2.0; 2.0, 1.0], &DMatrix::identity(2, 2)).unwrap_err();
        assert_eq!(err, Error::Singular { pivot: 1 });
    }

    #[test]
    fn solve_rejects_asymmetric() {
        let err = spd_solve(&dmatrix![2.0, 1.0; 0.0, 2.0], &DMatrix::identity(2, 2)).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn woodbury_hand_example() {
        let post = woodbury_posterior_cov(&DMatrix::identity(2, 2), &dmatrix![1.0, 0.0], &dmatrix![1.0]).unwrap();
        assert_relative_eq!(post, dmatrix![0.5, 0.0; 0.0, 1.0], epsilon = 1e-14);
    }

    #[test]
    fn woodbury_zero_observation_keeps_prior() {
        let post = woodbury_posterior_cov(&DMatrix::identity(2, 2), &DMatrix::zeros(1, 2), &dmatrix![1.0]).unwrap();
        assert_relative_eq!(post, DMatrix::identity(2, 2), epsilon = 1e-15);
    }

    #[test]
    fn woodbury_singular_r() {
        let err = woodbury_posterior_cov(&DMatrix::identity(2, 2), &dmatrix![1.0, 0.0], &dmatrix![0.0]).unwrap_err();
        assert_eq!(err, Error::Singular { pivot: 0 });
    }

    #[test]
    fn validate_catches_dimension_and_sign() {
        let bad = GaussianBelief {
            mean: DVector::zeros(3),
            cov: Covariance::Diagonal(DVector::from_element(2, 1.0)),
            step: 0,
        };
        assert!(bad.validate().is_err());
        let neg = GaussianBelief {
            mean: DVector::zeros(2),
            cov: Covariance::Diagonal(DVector::from_vec(vec![1.0, -1.0])),
            step: 0,
        };
        assert_eq!(neg.validate(), Err(Error::Singular { pivot: 1 }));
    }

    #[test]
    fn diagonal_mul_transpose_matches_dense() {
        let d = Covariance::Diagonal(DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let h = dmatrix![1.0, 2.0, 3.0; -1.0, 0.5, 0.0];
        assert_eq!(d.mul_transpose(&h), d.to_dense() * h.transpose());
    }
}
