//! Held-out retrieval accuracy.

use kalnat::obsmodel::{cosine_similarity_matrix, Tower};
use kalnat::TwoTowerModel;
use nalgebra::DVector;

use crate::data::PairSet;
use crate::error::{HarnessError, Result};

/// Fraction of test images whose most similar test text (cosine) carries the
/// same class label. Ties go to the lowest index.
pub fn retrieval_accuracy(model: &TwoTowerModel, theta: &DVector<f64>, testset: &PairSet) -> Result<f64> {
    if testset.is_empty() {
        return Err(HarnessError::InvalidArgument(
            "retrieval needs a non-empty test set".into(),
        ));
    }
    let img = model.embed(Tower::Image, &testset.image, theta)?;
    let txt = model.embed(Tower::Text, &testset.text, theta)?;
    let sim = cosine_similarity_matrix(&img, &txt)?;
    let mut correct = 0usize;
    for i in 0..sim.nrows() {
        let mut best = 0;
        for j in 1..sim.ncols() {
            if sim[(i, j)] > sim[(i, best)] {
                best = j;
            }
        }
        if testset.labels[best] == testset.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / testset.len() as f64)
}
