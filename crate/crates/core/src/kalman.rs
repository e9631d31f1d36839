//! The Kalman-filter optimizer: predict, pre-update and update over a
//! [`GaussianBelief`], in dense or diagonal covariance form.

use nalgebra::{DMatrix, DVector};

use crate::belief::{
    floor_diagonal, symmetrize, Backend, Cholesky, Covariance, GaussianBelief, ProcessNoise, COV_FLOOR,
};
use crate::error::{dims, invalid, Result};
use crate::obsmodel::{batch_similarity, clip_loss, jacobian, model_output, target_output, Minibatch, TwoTowerModel};
use crate::robust::{
    ema_update, mahalanobis, regulation, residual, rhat_method1, LambdaScope, NoiseState, RhatMethod, RobustConfig,
};

/// Per-iteration metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Filter step index after the update (1-based).
    pub step: u64,
    pub residual_norm: f64,
    pub d_m: f64,
    pub lambda: f64,
    /// Contrastive loss of the batch at the predicted mean.
    pub loss: f64,
    pub r_trace: f64,
    /// ‖μ_k − μ_{k|k-1}‖
    pub step_norm: f64,
    pub ood_fraction: f64,
}

impl StepReport {
    pub fn is_finite(&self) -> bool {
        [
            self.residual_norm,
            self.d_m,
            self.lambda,
            self.loss,
            self.r_trace,
            self.step_norm,
            self.ood_fraction,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanOptimizer {
    pub belief: GaussianBelief,
    pub noise: NoiseState,
    pub process: ProcessNoise,
    pub robust: RobustConfig,
}

/// Σ_{k|k-1} = Σ_{k-1} + q·I; the mean carries over unchanged.
pub fn predict(belief: &GaussianBelief, process: ProcessNoise) -> GaussianBelief {
    let q = process.q();
    let mut out = belief.clone();
    if q == 0.0 {
        return out;
    }
    match &mut out.cov {
        Covariance::Full(s) => {
            for i in 0..s.nrows() {
                s[(i, i)] += q;
            }
        }
        Covariance::Diagonal(d) => d.add_scalar_mut(q),
    }
    out
}

/// Quantities shared by the gain, the covariance update and R̂.
struct Projection {
    /// Σ·Hᵀ, n×m
    sigma_ht: DMatrix<f64>,
    /// H·Σ·Hᵀ, m×m
    hsh: DMatrix<f64>,
}

fn project(prior: &GaussianBelief, h: &DMatrix<f64>) -> Result<Projection> {
    if h.ncols() != prior.dim() {
        return Err(dims(format!(
            "H has {} columns, belief dimension {}",
            h.ncols(),
            prior.dim()
        )));
    }
    let sigma_ht = prior.cov.mul_transpose(h);
    let mut hsh = h * &sigma_ht;
    symmetrize(&mut hsh);
    Ok(Projection { sigma_ht, hsh })
}

/// Solves the innovation system and returns `X = S⁻¹·H·Σ` (m×n), i.e. Kᵀ.
fn gain_transpose(proj: &Projection, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if r.shape() != proj.hsh.shape() {
        return Err(dims(format!("R is {:?}, H·Σ·Hᵀ is {:?}", r.shape(), proj.hsh.shape())));
    }
    let mut innovation = &proj.hsh + r;
    symmetrize(&mut innovation);
    let chol = Cholesky::new(&innovation)?;
    chol.solve(&proj.sigma_ht.transpose())
}

/// K = Σ·Hᵀ·(H·Σ·Hᵀ + R)⁻¹, n×m, solved against the m×m innovation matrix.
pub fn gain(prior: &GaussianBelief, h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let proj = project(prior, h)?;
    Ok(gain_transpose(&proj, r)?.transpose())
}

fn check_lambda(lam: f64) -> Result<()> {
    if !(lam > 0.0 && lam <= 1.0) {
        return Err(invalid(format!("lambda must lie in (0, 1], got {lam}")));
    }
    Ok(())
}

/// Σ ← Σ + q·I − scale·(Σ_{k|k-1}·Hᵀ)·(S⁻¹·H·Σ_{k|k-1}), in place.
fn contract_cov(cov: &mut Covariance, q: f64, proj: &Projection, kt: &DMatrix<f64>, scale: f64) {
    match cov {
        Covariance::Full(s) => {
            if q != 0.0 {
                for i in 0..s.nrows() {
                    s[(i, i)] += q;
                }
            }
            s.gemm(-scale, &proj.sigma_ht, kt, 1.0);
            symmetrize(s);
            floor_diagonal(s, COV_FLOOR);
        }
        Covariance::Diagonal(d) => {
            for (i, di) in d.iter_mut().enumerate() {
                let reduction: f64 = proj
                    .sigma_ht
                    .row(i)
                    .iter()
                    .zip(kt.column(i).iter())
                    .map(|(a, b)| a * b)
                    .sum();
                *di = (*di + q - scale * reduction).max(COV_FLOOR);
            }
        }
    }
}

fn apply_update(
    prior: &GaussianBelief,
    proj: &Projection,
    innov: &DVector<f64>,
    r: &DMatrix<f64>,
    lam: f64,
    scope: LambdaScope,
) -> Result<GaussianBelief> {
    check_lambda(lam)?;
    if innov.len() != proj.hsh.nrows() {
        return Err(dims(format!(
            "residual length {} vs H rows {}",
            innov.len(),
            proj.hsh.nrows()
        )));
    }
    let kt = gain_transpose(proj, r)?;
    let mut out = prior.clone();
    out.mean += kt.tr_mul(innov) * lam;
    contract_cov(&mut out.cov, 0.0, proj, &kt, scope.cov_scale(lam));
    out.step += 1;
    Ok(out)
}

/// Posterior from the predicted prior: μ += λ·K·r, Σ −= K·H·Σ (λ-scaled under
/// [`LambdaScope::TextIVD`]).
pub fn update(
    prior: &GaussianBelief,
    h: &DMatrix<f64>,
    innov: &DVector<f64>,
    r: &DMatrix<f64>,
    lam: f64,
    scope: LambdaScope,
) -> Result<GaussianBelief> {
    let proj = project(prior, h)?;
    apply_update(prior, &proj, innov, r, lam, scope)
}

impl KalmanOptimizer {
    pub fn new(belief: GaussianBelief, noise: NoiseState, process: ProcessNoise, robust: RobustConfig) -> Self {
        Self {
            belief,
            noise,
            process,
            robust,
        }
    }

    pub fn backend(&self) -> Backend {
        self.belief.backend()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.belief.mean
    }

    /// One full filter iteration on `batch`. On error the optimizer is left
    /// untouched.
    pub fn step(&mut self, model: &TwoTowerModel, batch: &Minibatch) -> Result<StepReport> {
        let m = batch.len();
        if m != self.noise.dim() {
            return Err(invalid(format!(
                "batch has {m} pairs but the noise covariance is {0}x{0}",
                self.noise.dim()
            )));
        }
        if model.n_params() != self.belief.dim() {
            return Err(invalid(format!(
                "model has {} parameters, belief has {}",
                model.n_params(),
                self.belief.dim()
            )));
        }

        // Prediction: μ carries over; Σ_{k|k-1} = Σ + q·I enters through the
        // projections and is written to Σ on commit
        let q = self.process.q();
        let mean = &self.belief.mean;

        // Pre-updating, all evaluated at the predicted mean
        let yhat = model_output(model, batch, mean)?;
        let r = residual(&target_output(m)?, &yhat)?;
        let h = jacobian(model, batch, mean)?;
        let d_m = mahalanobis(&r, self.noise.r())?;
        let lambda = regulation(d_m, self.robust.alpha)?;
        let lambda = lambda.max(f64::MIN_POSITIVE);
        let mut sigma_ht = self.belief.cov.mul_transpose(&h);
        if q != 0.0 {
            sigma_ht += h.transpose() * q;
        }
        let mut hsh = &h * &sigma_ht;
        symmetrize(&mut hsh);
        let proj = Projection { sigma_ht, hsh };
        let rhat = match self.noise.method() {
            RhatMethod::ZerothOrder => rhat_method1(&r),
            RhatMethod::FirstOrder => rhat_method1(&r) + &proj.hsh,
        };
        let noise = ema_update(&self.noise, &rhat, lambda)?;
        let kt = gain_transpose(&proj, noise.r())?;
        let loss = clip_loss(&batch_similarity(model, batch, mean)?, model.tau())?;

        // Updating
        let delta = kt.tr_mul(&r) * lambda;
        self.belief.mean += &delta;
        contract_cov(
            &mut self.belief.cov,
            q,
            &proj,
            &kt,
            self.robust.lambda_scope.cov_scale(lambda),
        );
        self.belief.step += 1;
        self.noise = noise;
        Ok(StepReport {
            step: self.belief.step,
            residual_norm: r.norm(),
            d_m,
            lambda,
            loss,
            r_trace: self.noise.r().trace(),
            step_norm: delta.norm(),
            ood_fraction: batch.ood_fraction(),
        })
    }

    /// [`step`](Self::step) restricted to the diagonal backend: per-step cost
    /// O(m²·n + m³), covariance storage n scalars.
    pub fn diag_step(&mut self, model: &TwoTowerModel, batch: &Minibatch) -> Result<StepReport> {
        if self.backend() != Backend::Diagonal {
            return Err(invalid("diag_step requires the Diagonal backend"));
        }
        self.step(model, batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::{init_belief, woodbury_posterior_cov};
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn eye_belief() -> GaussianBelief {
        init_belief(2, 1.0, Backend::Full).unwrap()
    }

    #[test]
    fn predict_examples() {
        let b = eye_belief();
        assert_eq!(predict(&b, ProcessNoise::new(0.0).unwrap()), b);
        let p = predict(&b, ProcessNoise::new(0.1).unwrap());
        assert_relative_eq!(p.cov.to_dense(), DMatrix::identity(2, 2) * 1.1, epsilon = 1e-15);
        assert_eq!(p.step, 0);

        let d = GaussianBelief::new(DVector::zeros(2), Covariance::Diagonal(dvector![0.5, 2.0]), 0).unwrap();
        let p = predict(&d, ProcessNoise::new(0.5).unwrap());
        assert_eq!(p.cov, Covariance::Diagonal(dvector![1.0, 2.5]));
    }

    #[test]
    fn gain_examples() {
        let k = gain(&eye_belief(), &dmatrix![1.0, 0.0], &dmatrix![1.0]).unwrap();
        assert_relative_eq!(k, dmatrix![0.5; 0.0], epsilon = 1e-15);

        let k = gain(&eye_belief(), &DMatrix::zeros(1, 2), &dmatrix![1.0]).unwrap();
        assert_eq!(k, DMatrix::zeros(2, 1));

        let k = gain(&eye_belief(), &dmatrix![1.0, 0.0], &dmatrix![1e12]).unwrap();
        assert!(k.norm() <= 1e-11);
    }

    #[test]
    fn gain_singular_innovation() {
        let err = gain(&eye_belief(), &DMatrix::zeros(1, 2), &dmatrix![0.0]).unwrap_err();
        assert!(matches!(err, crate::Error::Singular { pivot: 0 }));
    }

    #[test]
    fn update_hand_example() {
        let post = update(
            &eye_belief(),
            &dmatrix![1.0, 0.0],
            &dvector![1.0],
            &dmatrix![1.0],
            1.0,
            LambdaScope::Alg1,
        )
        .unwrap();
        assert_relative_eq!(post.mean, dvector![0.5, 0.0], epsilon = 1e-15);
        assert_relative_eq!(post.cov.to_dense(), dmatrix![0.5, 0.0; 0.0, 1.0], epsilon = 1e-15);
        assert_eq!(post.step, 1);
        let wb = woodbury_posterior_cov(&DMatrix::identity(2, 2), &dmatrix![1.0, 0.0], &dmatrix![1.0]).unwrap();
        assert_relative_eq!(post.cov.to_dense(), wb, epsilon = 1e-14);
    }

    #[test]
    fn zero_residual_keeps_mean_but_contracts() {
        let post = update(
            &eye_belief(),
            &dmatrix![1.0, 0.0],
            &dvector![0.0],
            &dmatrix![1.0],
            1.0,
            LambdaScope::Alg1,
        )
        .unwrap();
        assert_eq!(post.mean, dvector![0.0, 0.0]);
        assert!(post.cov.to_dense()[(0, 0)] < 1.0);
    }

    #[test]
    fn textivd_scales_contraction() {
        let args = (dmatrix![1.0, 0.0], dvector![1.0], dmatrix![1.0]);
        let alg1 = update(&eye_belief(), &args.0, &args.1, &args.2, 0.5, LambdaScope::Alg1).unwrap();
        let text = update(&eye_belief(), &args.0, &args.1, &args.2, 0.5, LambdaScope::TextIVD).unwrap();
        assert_eq!(alg1.mean, text.mean);
        assert_relative_eq!(alg1.mean, dvector![0.25, 0.0], epsilon = 1e-15);
        assert_relative_eq!(alg1.cov.to_dense()[(0, 0)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(text.cov.to_dense()[(0, 0)], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn update_rejects_bad_lambda() {
        for lam in [0.0, -0.1, 1.1] {
            assert!(update(
                &eye_belief(),
                &dmatrix![1.0, 0.0],
                &dvector![1.0],
                &dmatrix![1.0],
                lam,
                LambdaScope::Alg1
            )
            .is_err());
        }
    }

    #[test]
    fn diagonal_update_matches_full_on_axis_aligned_rows() {
        let full = GaussianBelief::new(
            DVector::zeros(3),
            Covariance::Full(DMatrix::from_diagonal(&dvector![1.0, 2.0, 0.5])),
            0,
        )
        .unwrap();
        let diag = GaussianBelief::new(DVector::zeros(3), Covariance::Diagonal(dvector![1.0, 2.0, 0.5]), 0).unwrap();
        let h = dmatrix![2.0, 0.0, 0.0; 0.0, 0.0, -1.5];
        let r = dmatrix![0.3, 0.0; 0.0, 0.7];
        let innov = dvector![0.4, -0.2];
        let a = update(&full, &h, &innov, &r, 1.0, LambdaScope::Alg1).unwrap();
        let b = update(&diag, &h, &innov, &r, 1.0, LambdaScope::Alg1).unwrap();
        assert_eq!(a.cov.diagonal(), b.cov.diagonal());
        assert_eq!(a.mean, b.mean);
    }
}
