//! Randomized checks of the filter against its natural-gradient restatement.

use kalnat::ngd::{empirical_fisher, fisher_identity_deviation, gauss_newton_fisher, verify_lemma1};
use kalnat::{Covariance, GaussianBelief};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

/// One linear-Gaussian update problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub prior: GaussianBelief,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub innov: DVector<f64>,
}

fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z
    })
}

/// Q·diag(λ)·Qᵀ with Q a random orthogonal matrix and eigenvalues
/// log-uniform on `[1/√cond, √cond]`, so the condition number is ≤ `cond`.
pub fn random_spd<R: Rng>(rng: &mut R, n: usize, cond: f64) -> DMatrix<f64> {
    let q = gaussian(rng, n, n).qr().q();
    let half = cond.ln() / 2.0;
    let eig = DVector::from_fn(n, |_, _| rng.random_range(-half..=half).exp());
    let mut a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    kalnat::belief::symmetrize(&mut a);
    a
}

/// A random instance with `n ≤ max_n`, `m ≤ max_m` and prior covariance and R
/// each conditioned at most `cond`.
pub fn random_instance<R: Rng>(rng: &mut R, max_n: usize, max_m: usize, cond: f64) -> Result<Instance> {
    let n = rng.random_range(1..=max_n);
    let m = rng.random_range(1..=max_m);
    let mean = DVector::from_column_slice(gaussian(rng, n, 1).as_slice());
    let prior = GaussianBelief::new(mean, Covariance::Full(random_spd(rng, n, cond)), 0)?;
    Ok(Instance {
        prior,
        h: gaussian(rng, m, n),
        r: random_spd(rng, m, cond),
        innov: DVector::from_column_slice(gaussian(rng, m, 1).as_slice()),
    })
}

/// Worst-case deviations over a batch of random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub instances: usize,
    pub max_mean_deviation: f64,
    pub max_cov_deviation: f64,
    pub max_fisher_deviation: f64,
}

pub fn verify_suite(instances: usize, seed: u64) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = VerifyReport {
        instances,
        max_mean_deviation: 0.0,
        max_cov_deviation: 0.0,
        max_fisher_deviation: 0.0,
    };
    for _ in 0..instances {
        let inst = random_instance(&mut rng, 16, 4, 1e4)?;
        let forms = verify_lemma1(&inst.prior, &inst.h, &inst.r, &inst.innov)?;
        let fisher = fisher_identity_deviation(&inst.prior, &inst.h, &inst.r)?;
        report.max_mean_deviation = report.max_mean_deviation.max(forms.mean_deviation);
        report.max_cov_deviation = report.max_cov_deviation.max(forms.cov_deviation);
        report.max_fisher_deviation = report.max_fisher_deviation.max(fisher);
    }
    Ok(report)
}

/// Relative Frobenius gap between the sampled Fisher and Hᵀ R⁻¹ H on one
/// random instance.
pub fn empirical_fisher_gap(samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = random_instance(&mut rng, 16, 4, 1e2)?;
    let exact = gauss_newton_fisher(&inst.h, &inst.r)?.matrix;
    let est = empirical_fisher(&inst.h, &inst.r, samples, seed)?.matrix;
    Ok((est - &exact).norm() / exact.norm())
}
