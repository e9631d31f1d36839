//! Per-step timing of the Full and Diagonal covariance backends.

use std::time::Instant;

use kalnat::{Backend, Minibatch, Provenance, TwoTowerModel};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::experiment::{build_optimizer, median};

const BENCH_RANK: usize = 1;
const BENCH_EMBED: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchPoint {
    pub backend: Backend,
    pub n: usize,
    /// Median wall time of one optimizer step, in seconds.
    pub secs_per_step: f64,
    /// Number of scalars held by the covariance.
    pub cov_storage: usize,
}

/// Input dimension giving exactly `n` adapter parameters at rank 1 and
/// embedding width 16.
pub fn d_in_for(n: usize) -> Result<usize> {
    let per_tower = n / (2 * BENCH_RANK);
    if !n.is_multiple_of(2 * BENCH_RANK) || per_tower <= BENCH_EMBED {
        return Err(HarnessError::InvalidArgument(format!(
            "bench sizes must be even and > {}, got {n}",
            2 * BENCH_RANK * BENCH_EMBED
        )));
    }
    Ok(per_tower - BENCH_EMBED)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Times `steps` optimizer steps at parameter count `n` (after one warm-up
/// step) and reports the median.
pub fn bench_point(backend: Backend, n: usize, steps: usize, seed: u64) -> Result<BenchPoint> {
    let d_in = d_in_for(n)?;
    let cfg = ExperimentConfig {
        seed,
        d_in,
        d_embed: BENCH_EMBED,
        rank: BENCH_RANK,
        backend,
        ..ExperimentConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = gaussian(&mut rng, d_in, BENCH_EMBED, 1.0 / (d_in as f64).sqrt());
    let model = TwoTowerModel::new(w.clone(), w, BENCH_RANK, cfg.tau)?;
    let theta0 = model.init_theta(&mut rng);
    let mut opt = build_optimizer(&cfg, theta0)?;
    let m = cfg.batch_size;
    let batch = Minibatch::new(
        gaussian(&mut rng, m, d_in, 1.0),
        gaussian(&mut rng, m, d_in, 1.0),
        (0..m).collect(),
        vec![Provenance::Id; m],
    )?;

    opt.step(&model, &batch)?;
    let mut times = Vec::with_capacity(steps);
    for _ in 0..steps.max(1) {
        let t = Instant::now();
        opt.step(&model, &batch)?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(BenchPoint {
        backend,
        n,
        secs_per_step: median(&times),
        cov_storage: opt.belief.cov.storage_len(),
    })
}

/// Least-squares slope of log(time) against log(n).
pub fn loglog_slope(points: &[BenchPoint]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.secs_per_step.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_matches_request() {
        for n in [100, 1000, 10_000] {
            let d_in = d_in_for(n).unwrap();
            assert_eq!(2 * BENCH_RANK * (d_in + BENCH_EMBED), n);
        }
        assert!(d_in_for(31).is_err());
        assert!(d_in_for(32).is_err());
    }

    #[test]
    fn diagonal_storage_is_n() {
        let p = bench_point(Backend::Diagonal, 100, 2, 0).unwrap();
        assert_eq!(p.cov_storage, 100);
        let p = bench_point(Backend::Full, 100, 2, 0).unwrap();
        assert_eq!(p.cov_storage, 100 * 100);
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<BenchPoint> = [10usize, 100, 1000]
            .iter()
            .map(|&n| BenchPoint {
                backend: Backend::Full,
                n,
                secs_per_step: 1e-6 * (n as f64).powi(2),
                cov_storage: n * n,
            })
            .collect();
        assert!((loglog_slope(&pts) - 2.0).abs() < 1e-12);
    }
}
