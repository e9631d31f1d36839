//! Synthetic paired-feature datasets and OOD corruptions.
//!
//! Each class owns a shared centroid in feature space. Image-side samples
//! scatter isotropically around it; text-side centroids are the same point
//! displaced by a class-specific offset inside a low-dimensional "modality
//! gap" subspace. The gap is what the frozen towers get wrong and what the
//! adapters have to learn to undo.

use std::fmt;
use std::str::FromStr;

use kalnat::{Minibatch, Provenance};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

/// Dimension of the subspace carrying the text-side modality gap.
pub const GAP_RANK: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CorruptionMode {
    FeatureNoise,
    ClusterShift,
    LabelShuffle,
}

impl fmt::Display for CorruptionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CorruptionMode::FeatureNoise => "FeatureNoise",
            CorruptionMode::ClusterShift => "ClusterShift",
            CorruptionMode::LabelShuffle => "LabelShuffle",
        };
        f.write_str(s)
    }
}

impl FromStr for CorruptionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "featurenoise" => Ok(CorruptionMode::FeatureNoise),
            "clustershift" => Ok(CorruptionMode::ClusterShift),
            "labelshuffle" => Ok(CorruptionMode::LabelShuffle),
            other => Err(format!("unknown corruption mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftParams {
    pub severity: f64,
    pub mode: CorruptionMode,
}

/// Paired features with labels, one row per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub image: DMatrix<f64>,
    pub text: DMatrix<f64>,
    pub labels: Vec<usize>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the given rows into an in-distribution minibatch.
    pub fn batch(&self, rows: &[usize]) -> Result<Minibatch> {
        let d = self.image.ncols();
        let image = DMatrix::from_fn(rows.len(), d, |i, j| self.image[(rows[i], j)]);
        let text = DMatrix::from_fn(rows.len(), d, |i, j| self.text[(rows[i], j)]);
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Ok(Minibatch::new(image, text, labels, vec![Provenance::Id; rows.len()])?)
    }

    pub fn as_batch(&self) -> Result<Minibatch> {
        let rows: Vec<usize> = (0..self.len()).collect();
        self.batch(&rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: PairSet,
    pub test: PairSet,
    pub classes: usize,
    pub shots: usize,
    pub d_in: usize,
    pub shift: ShiftParams,
    pub seed: u64,
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Draws class centroids, then `shots` training pairs and
/// `test_per_class` held-out pairs per class. Deterministic in `config.seed`.
pub fn gen_synthetic_pairs(config: &ExperimentConfig) -> Result<SyntheticDataset> {
    let (classes, shots, d) = (config.classes, config.shots, config.d_in);
    if classes * shots < config.batch_size {
        return Err(HarnessError::Config {
            field: "shots",
            msg: format!(
                "not enough samples for one batch: {classes} classes x {shots} shots < batch_size {}",
                config.batch_size
            ),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let centroids = gaussian_matrix(&mut rng, classes, d, 1.0);
    // offsets have norm ≈ gap · ‖centroid‖
    let gap_basis = gaussian_matrix(&mut rng, GAP_RANK, d, 1.0 / (d as f64).sqrt());
    let gap_coords = gaussian_matrix(
        &mut rng,
        classes,
        GAP_RANK,
        config.gap * (d as f64 / GAP_RANK as f64).sqrt(),
    );
    let text_centroids = &centroids + gap_coords * &gap_basis;

    let sample = |per_class: usize, rng: &mut ChaCha8Rng| {
        let rows = classes * per_class;
        let mut image = DMatrix::zeros(rows, d);
        let mut text = DMatrix::zeros(rows, d);
        let mut labels = Vec::with_capacity(rows);
        for c in 0..classes {
            for s in 0..per_class {
                let row = c * per_class + s;
                for j in 0..d {
                    let zi: f64 = StandardNormal.sample(rng);
                    let zt: f64 = StandardNormal.sample(rng);
                    image[(row, j)] = centroids[(c, j)] + config.noise * zi;
                    text[(row, j)] = text_centroids[(c, j)] + config.noise * zt;
                }
                labels.push(c);
            }
        }
        PairSet { image, text, labels }
    };
    let train = sample(shots, &mut rng);
    let test = sample(config.test_per_class, &mut rng);

    Ok(SyntheticDataset {
        train,
        test,
        classes,
        shots,
        d_in: d,
        shift: ShiftParams {
            severity: config.ood_severity,
            mode: config.ood_mode,
        },
        seed: config.seed,
    })
}

fn entry_std(batch: &Minibatch) -> f64 {
    let all: Vec<f64> = batch
        .image_feats()
        .iter()
        .chain(batch.text_feats().iter())
        .copied()
        .collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Returns an OOD copy of `batch`.
///
/// * `FeatureNoise`: adds Gaussian noise of scale `severity · std` to every
///   feature entry, where `std` is the batch's own entry standard deviation.
/// * `ClusterShift`: translates every row by one random unit direction times
///   `severity · std · √d`.
/// * `LabelShuffle`: pairs image rows with a non-identity permutation of the
///   text rows (when `m ≥ 2`).
pub fn corrupt_batch(batch: &Minibatch, severity: f64, mode: CorruptionMode, seed: u64) -> Result<Minibatch> {
    if !(severity >= 0.0) || !severity.is_finite() {
        return Err(HarnessError::InvalidArgument(format!(
            "severity must be >= 0, got {severity}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let (m, d) = (batch.len(), batch.feature_dim());
    let mut image = batch.image_feats().clone();
    let mut text = batch.text_feats().clone();
    match mode {
        CorruptionMode::FeatureNoise => {
            let scale = severity * entry_std(batch);
            image += gaussian_matrix(&mut rng, m, d, scale);
            text += gaussian_matrix(&mut rng, m, d, scale);
        }
        CorruptionMode::ClusterShift => {
            let dir = DVector::from_fn(d, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            });
            let shift = dir.normalize() * (severity * entry_std(batch) * (d as f64).sqrt());
            for mut row in image.row_iter_mut().chain(text.row_iter_mut()) {
                row += shift.transpose();
            }
        }
        CorruptionMode::LabelShuffle => {
            if m >= 2 {
                let identity: Vec<usize> = (0..m).collect();
                let mut perm = identity.clone();
                while perm == identity {
                    perm.shuffle(&mut rng);
                }
                text = DMatrix::from_fn(m, d, |i, j| batch.text_feats()[(perm[i], j)]);
            }
        }
    }
    Ok(Minibatch::new(
        image,
        text,
        batch.labels().to_vec(),
        vec![Provenance::Ood; m],
    )?)
}

/// Row order of one epoch; batches are consecutive chunks, the last partial
/// chunk is dropped.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(100 + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Which global step indices receive a corrupted batch: `round(fraction ·
/// total)` positions drawn without replacement.
pub fn ood_positions(total_steps: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let count = ((fraction * total_steps as f64).round() as usize).min(total_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut idx: Vec<usize> = (0..total_steps).collect();
    idx.shuffle(&mut rng);
    let mut flags = vec![false; total_steps];
    for &i in &idx[..count] {
        flags[i] = true;
    }
    flags
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_batch() -> Minibatch {
        Minibatch::new(
            DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]),
            DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 1.0, 2.0, -2.0, 1.0]),
            vec![0, 1],
            vec![Provenance::Id; 2],
        )
        .unwrap()
    }

    #[test]
    fn default_counts() {
        let cfg = ExperimentConfig::default();
        let ds = gen_synthetic_pairs(&cfg).unwrap();
        assert_eq!(ds.train.len(), 128);
        assert!(ds.train.len() / cfg.batch_size >= 1);
        for c in 0..8 {
            assert_eq!(ds.train.labels.iter().filter(|&&l| l == c).count(), 16);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = ExperimentConfig::default();
        assert_eq!(gen_synthetic_pairs(&cfg).unwrap(), gen_synthetic_pairs(&cfg).unwrap());
        let other = ExperimentConfig {
            seed: cfg.seed + 1,
            ..cfg.clone()
        };
        assert_ne!(gen_synthetic_pairs(&cfg).unwrap(), gen_synthetic_pairs(&other).unwrap());
    }

    #[test]
    fn too_few_samples() {
        let cfg = ExperimentConfig {
            shots: 1,
            ..ExperimentConfig::default()
        };
        let err = gen_synthetic_pairs(&cfg).unwrap_err();
        assert!(err.to_string().contains("not enough samples for one batch"));
    }

    #[test]
    fn zero_noise_is_linearly_separable() {
        let cfg = ExperimentConfig {
            noise: 0.0,
            ..ExperimentConfig::default()
        };
        let ds = gen_synthetic_pairs(&cfg).unwrap();
        // nearest-centroid probe on image features, centroids from train
        let d = ds.d_in;
        let mut cents = DMatrix::zeros(ds.classes, d);
        for (i, &l) in ds.train.labels.iter().enumerate() {
            let row = ds.train.image.row(i).into_owned();
            let mut c = cents.row_mut(l);
            c += row / cfg.shots as f64;
        }
        let correct = (0..ds.test.len())
            .filter(|&i| {
                let x = ds.test.image.row(i);
                let best = (0..ds.classes)
                    .min_by(|&a, &b| {
                        let da = (x - cents.row(a)).norm();
                        let db = (x - cents.row(b)).norm();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                best == ds.test.labels[i]
            })
            .count();
        assert_eq!(correct, ds.test.len());
    }

    #[test]
    fn zero_severity_noise_only_flags() {
        let b = small_batch();
        let c = corrupt_batch(&b, 0.0, CorruptionMode::FeatureNoise, 9).unwrap();
        assert_eq!(c.image_feats(), b.image_feats());
        assert_eq!(c.text_feats(), b.text_feats());
        assert_eq!(c.provenance(), &[Provenance::Ood; 2]);
    }

    #[test]
    fn label_shuffle_swaps_pair_of_two() {
        let b = small_batch();
        for seed in 0..5 {
            let c = corrupt_batch(&b, 1.0, CorruptionMode::LabelShuffle, seed).unwrap();
            assert_eq!(c.text_feats().row(0), b.text_feats().row(1));
            assert_eq!(c.text_feats().row(1), b.text_feats().row(0));
            assert_eq!(c.image_feats(), b.image_feats());
        }
    }

    #[test]
    fn cluster_shift_moves_rows_uniformly() {
        let b = small_batch();
        let c = corrupt_batch(&b, 2.0, CorruptionMode::ClusterShift, 4).unwrap();
        let d0 = c.image_feats().row(0) - b.image_feats().row(0);
        let d1 = c.text_feats().row(1) - b.text_feats().row(1);
        assert!((&d0 - &d1).amax() < 1e-12);
        assert!(d0.norm() > 0.0);
    }

    #[test]
    fn negative_severity_rejected() {
        assert!(corrupt_batch(&small_batch(), -1.0, CorruptionMode::FeatureNoise, 0).is_err());
    }

    #[test]
    fn ood_positions_count() {
        let flags = ood_positions(60, 0.5, 1);
        assert_eq!(flags.iter().filter(|f| **f).count(), 30);
        assert_eq!(ood_positions(60, 0.0, 1).iter().filter(|f| **f).count(), 0);
        assert_eq!(flags, ood_positions(60, 0.5, 1));
    }
}
