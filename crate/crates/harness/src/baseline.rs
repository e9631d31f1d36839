//! First-order comparator: plain SGD on the contrastive loss.

use kalnat::obsmodel::clip_loss_and_gradient;
use kalnat::{Minibatch, TwoTowerModel};
use nalgebra::DVector;

use crate::error::{HarnessError, Result};

/// θ − lr·∇L_CLIP(batch, θ).
pub fn sgd_baseline_step(
    theta: &DVector<f64>,
    model: &TwoTowerModel,
    batch: &Minibatch,
    lr: f64,
) -> Result<DVector<f64>> {
    Ok(sgd_step_with_loss(theta, model, batch, lr)?.0)
}

/// Like [`sgd_baseline_step`], also returning the pre-step loss.
pub fn sgd_step_with_loss(
    theta: &DVector<f64>,
    model: &TwoTowerModel,
    batch: &Minibatch,
    lr: f64,
) -> Result<(DVector<f64>, f64)> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(HarnessError::InvalidArgument(format!(
            "learning rate must be >= 0, got {lr}"
        )));
    }
    let (loss, grad) = clip_loss_and_gradient(model, batch, theta)?;
    Ok((theta - grad * lr, loss))
}
