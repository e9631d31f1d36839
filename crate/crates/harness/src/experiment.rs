//! Training runs: data streaming, OOD injection, optimizer stepping and
//! divergence handling.

use std::path::Path;
use std::time::Instant;

use kalnat::obsmodel::{model_output, target_output};
use kalnat::{init_belief, KalmanOptimizer, Minibatch, NoiseState, ProcessNoise, RobustConfig, TwoTowerModel};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::baseline::sgd_step_with_loss;
use crate::config::{ExperimentConfig, OptimizerKind};
use crate::data::{corrupt_batch, epoch_order, gen_synthetic_pairs, ood_positions, SyntheticDataset};
use crate::error::{HarnessError, Result};
use crate::eval::retrieval_accuracy;
use crate::metrics::{write_metrics_csv, write_summary, Summary};

/// ‖μ‖ beyond which a run counts as diverged.
pub const DIVERGENCE_NORM: f64 = 1e6;

/// Frozen towers for a config. Both towers share one random projection,
/// standing in for a pretrained, already aligned encoder pair.
pub fn build_model(cfg: &ExperimentConfig) -> Result<TwoTowerModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(4);
    let scale = 1.0 / (cfg.d_in as f64).sqrt();
    let w = DMatrix::from_fn(cfg.d_in, cfg.d_embed, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    });
    Ok(TwoTowerModel::new(w.clone(), w, cfg.rank, cfg.tau)?)
}

/// Adapter initialization θ₀ for a config.
pub fn initial_theta(cfg: &ExperimentConfig, model: &TwoTowerModel) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(5);
    model.init_theta(&mut rng)
}

/// A fresh optimizer with belief N(θ₀, σ₀·I) and R₀ = max(r0, ε)·I.
pub fn build_optimizer(cfg: &ExperimentConfig, theta0: DVector<f64>) -> Result<KalmanOptimizer> {
    let mut belief = init_belief(theta0.len(), cfg.sigma0, cfg.backend)?;
    belief.mean = theta0;
    let noise = NoiseState::with_initial(cfg.batch_size, cfg.r0, cfg.beta, cfg.epsilon, cfg.rhat_method)?;
    Ok(KalmanOptimizer::new(
        belief,
        noise,
        ProcessNoise::new(cfg.q)?,
        RobustConfig::new(cfg.alpha, cfg.lambda_scope)?,
    ))
}

/// One metrics row. SGD steps have no filter state and log `d_M = 0`,
/// `lambda = 1`, `r_trace = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub step: u64,
    pub loss: f64,
    pub residual_norm: f64,
    pub d_m: f64,
    pub lambda: f64,
    pub r_trace: f64,
    pub step_norm: f64,
    pub ood: bool,
}

#[derive(Debug, Clone)]
pub enum Trainer {
    Kalman(KalmanOptimizer),
    Sgd { theta: DVector<f64>, lr: f64, step: u64 },
}

impl Trainer {
    pub fn theta(&self) -> &DVector<f64> {
        match self {
            Trainer::Kalman(opt) => opt.mean(),
            Trainer::Sgd { theta, .. } => theta,
        }
    }

    pub fn steps_done(&self) -> u64 {
        match self {
            Trainer::Kalman(opt) => opt.belief.step,
            Trainer::Sgd { step, .. } => *step,
        }
    }
}

/// An in-progress training run that can be stepped, inspected and resumed.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: ExperimentConfig,
    pub data: SyntheticDataset,
    pub model: TwoTowerModel,
    pub trainer: Trainer,
    ood_flags: Vec<bool>,
    diverged: bool,
}

fn corruption_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_add(1)
}

impl Run {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data = gen_synthetic_pairs(cfg)?;
        let model = build_model(cfg)?;
        let theta0 = initial_theta(cfg, &model);
        let trainer = match cfg.optimizer {
            OptimizerKind::Kalman => Trainer::Kalman(build_optimizer(cfg, theta0)?),
            OptimizerKind::Sgd => Trainer::Sgd {
                theta: theta0,
                lr: cfg.lr,
                step: 0,
            },
        };
        Ok(Self::assemble(cfg, data, model, trainer))
    }

    /// Continues a Kalman run from a restored optimizer; the step counter
    /// picks up where the optimizer left off.
    pub fn resume(cfg: &ExperimentConfig, opt: KalmanOptimizer) -> Result<Self> {
        cfg.validate()?;
        if cfg.optimizer != OptimizerKind::Kalman {
            return Err(HarnessError::InvalidArgument("only Kalman runs can be resumed".into()));
        }
        let data = gen_synthetic_pairs(cfg)?;
        let model = build_model(cfg)?;
        if opt.belief.dim() != model.n_params() {
            return Err(HarnessError::Checkpoint {
                field: "n".into(),
                msg: format!(
                    "checkpoint has n={}, configured model has {}",
                    opt.belief.dim(),
                    model.n_params()
                ),
            });
        }
        Ok(Self::assemble(cfg, data, model, Trainer::Kalman(opt)))
    }

    fn assemble(cfg: &ExperimentConfig, data: SyntheticDataset, model: TwoTowerModel, trainer: Trainer) -> Self {
        let total = cfg.total_steps();
        Self {
            cfg: cfg.clone(),
            data,
            model,
            trainer,
            ood_flags: ood_positions(total, cfg.ood_fraction, cfg.seed),
            diverged: false,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.train.len() / self.cfg.batch_size
    }

    pub fn total_steps(&self) -> usize {
        self.ood_flags.len()
    }

    pub fn steps_done(&self) -> usize {
        self.trainer.steps_done() as usize
    }

    pub fn is_finished(&self) -> bool {
        self.diverged || self.steps_done() >= self.total_steps()
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    pub fn theta(&self) -> &DVector<f64> {
        self.trainer.theta()
    }

    pub fn ood_flags(&self) -> &[bool] {
        &self.ood_flags
    }

    /// The minibatch fed at global step `k` (0-based), corrupted when `k` is
    /// an OOD position.
    pub fn batch_at(&self, k: usize) -> Result<Minibatch> {
        let per_epoch = self.steps_per_epoch();
        let (epoch, within) = (k / per_epoch, k % per_epoch);
        let order = epoch_order(self.data.train.len(), self.cfg.seed, epoch);
        let b = self.cfg.batch_size;
        let batch = self.data.train.batch(&order[within * b..(within + 1) * b])?;
        if self.ood_flags.get(k).copied().unwrap_or(false) {
            corrupt_batch(
                &batch,
                self.cfg.ood_severity,
                self.cfg.ood_mode,
                corruption_seed(self.cfg.seed, k),
            )
        } else {
            Ok(batch)
        }
    }

    /// Trains on an explicit batch. Divergence (numerical failure, non-finite
    /// loss, or ‖θ‖ > 1e6) marks the run as finished; the offending row is
    /// still returned when one was produced.
    pub fn step_on(&mut self, batch: &Minibatch) -> Result<Option<StepRow>> {
        if self.diverged {
            return Ok(None);
        }
        let ood = batch.ood_fraction() > 0.0;
        let row = match &mut self.trainer {
            Trainer::Kalman(opt) => match opt.step(&self.model, batch) {
                Ok(rep) => Some(StepRow {
                    step: rep.step,
                    loss: rep.loss,
                    residual_norm: rep.residual_norm,
                    d_m: rep.d_m,
                    lambda: rep.lambda,
                    r_trace: rep.r_trace,
                    step_norm: rep.step_norm,
                    ood,
                }),
                Err(kalnat::Error::InvalidArgument(msg)) => {
                    return Err(HarnessError::InvalidArgument(msg));
                }
                Err(_) => None,
            },
            Trainer::Sgd { theta, lr, step } => {
                let yhat = model_output(&self.model, batch, theta)?;
                let residual_norm = (target_output(batch.len())? - yhat).norm();
                let (next, loss) = sgd_step_with_loss(theta, &self.model, batch, *lr)?;
                let step_norm = (&next - &*theta).norm();
                *theta = next;
                *step += 1;
                Some(StepRow {
                    step: *step,
                    loss,
                    residual_norm,
                    d_m: 0.0,
                    lambda: 1.0,
                    r_trace: 0.0,
                    step_norm,
                    ood,
                })
            }
        };
        let theta = self.trainer.theta();
        let blown = !theta.iter().all(|v| v.is_finite()) || theta.norm() > DIVERGENCE_NORM;
        match row {
            Some(row) if row.loss.is_finite() && !blown => Ok(Some(row)),
            Some(row) => {
                self.diverged = true;
                Ok(Some(row))
            }
            None => {
                self.diverged = true;
                Ok(None)
            }
        }
    }

    /// Advances one step along the configured stream.
    pub fn step(&mut self) -> Result<Option<StepRow>> {
        if self.is_finished() {
            return Ok(None);
        }
        let batch = self.batch_at(self.steps_done())?;
        self.step_on(&batch)
    }

    pub fn accuracy(&self) -> Result<f64> {
        retrieval_accuracy(&self.model, self.theta(), &self.data.test)
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<StepRow>,
    pub final_accuracy: f64,
    pub steps: usize,
    pub diverged: bool,
    pub wall_ms: u128,
    /// `(steps completed, accuracy)` pairs, present when tracing was requested.
    pub accuracy_trace: Vec<(usize, f64)>,
}

impl RunOutcome {
    /// First traced step count whose accuracy reaches `target`.
    pub fn steps_to(&self, target: f64) -> Option<usize> {
        self.accuracy_trace.iter().find(|(_, a)| *a >= target).map(|(s, _)| *s)
    }
}

/// Runs `run` to completion. With `trace_every = Some(k)`, test accuracy is
/// recorded before training and after every `k`-th step.
pub fn finish_run(run: &mut Run, trace_every: Option<usize>) -> Result<RunOutcome> {
    advance(run, usize::MAX, trace_every)
}

/// Like [`finish_run`] but stops once `stop_at` steps are done in total.
pub fn advance(run: &mut Run, stop_at: usize, trace_every: Option<usize>) -> Result<RunOutcome> {
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut trace = Vec::new();
    if trace_every.is_some() {
        trace.push((run.steps_done(), run.accuracy()?));
    }
    while run.steps_done() < stop_at {
        let Some(row) = run.step()? else { break };
        rows.push(row);
        if let Some(k) = trace_every {
            let done = run.steps_done();
            if done.is_multiple_of(k.max(1)) && !run.diverged() {
                trace.push((done, run.accuracy()?));
            }
        }
    }
    let final_accuracy = if run.diverged() { f64::NAN } else { run.accuracy()? };
    Ok(RunOutcome {
        steps: rows.len(),
        rows,
        final_accuracy,
        diverged: run.diverged(),
        wall_ms: start.elapsed().as_millis(),
        accuracy_trace: trace,
    })
}

/// Runs one configuration end to end.
pub fn run_config(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    finish_run(&mut Run::new(cfg)?, None)
}

/// Runs one configuration and writes `metrics.csv` and `summary.txt` into
/// `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    let outcome = run_config(cfg)?;
    write_outputs(cfg, &outcome, out_dir)?;
    Ok(outcome)
}

pub fn write_outputs(cfg: &ExperimentConfig, outcome: &RunOutcome, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(crate::error::io_err(out_dir))?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &outcome.rows)?;
    write_summary(
        &out_dir.join("summary.txt"),
        &Summary {
            config: cfg,
            final_accuracy: outcome.final_accuracy,
            steps: outcome.steps,
            diverged: outcome.diverged,
            wall_ms: outcome.wall_ms,
        },
    )
}

/// Median of finite values; diverged runs (NaN) count as the worst outcome.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v: Vec<f64> = values
        .iter()
        .map(|x| if x.is_nan() { f64::NEG_INFINITY } else { *x })
        .collect();
    v.sort_by(|a, b| a.total_cmp(b));
    let mid = v.len() / 2;
    let m = if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    };
    if m.is_finite() {
        m
    } else {
        f64::NAN
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            classes: 4,
            shots: 4,
            test_per_class: 5,
            d_in: 8,
            d_embed: 4,
            batch_size: 4,
            epochs: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn step_count_matches_config() {
        let cfg = small();
        let out = run_config(&cfg).unwrap();
        assert_eq!(out.steps, cfg.total_steps());
        assert_eq!(out.rows.last().unwrap().step as usize, cfg.total_steps());
        assert!(!out.diverged);
    }

    #[test]
    fn belief_starts_at_adapter_init() {
        let cfg = small();
        let run = Run::new(&cfg).unwrap();
        let model = build_model(&cfg).unwrap();
        assert_eq!(run.theta(), &initial_theta(&cfg, &model));
    }

    #[test]
    fn ood_rows_flagged() {
        let cfg = ExperimentConfig {
            ood_fraction: 0.5,
            ..small()
        };
        let out = run_config(&cfg).unwrap();
        let flagged = out.rows.iter().filter(|r| r.ood).count();
        assert_eq!(flagged, (0.5 * cfg.total_steps() as f64).round() as usize);
    }

    #[test]
    fn sgd_rows_have_neutral_filter_columns() {
        let cfg = ExperimentConfig {
            optimizer: OptimizerKind::Sgd,
            ..small()
        };
        let out = run_config(&cfg).unwrap();
        assert!(out.rows.iter().all(|r| r.lambda == 1.0 && r.d_m == 0.0));
    }

    #[test]
    fn median_handles_nan_as_worst() {
        assert_eq!(median(&[1.0, 3.0, 2.0]), 2.0);
        assert_eq!(median(&[f64::NAN, 0.5, 0.7]), 0.5);
        assert_eq!(median(&[1.0, 2.0]), 1.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let cfg = ExperimentConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 1e12,
            ..small()
        };
        let out = run_config(&cfg).unwrap();
        assert!(out.diverged);
        assert!(out.steps < cfg.total_steps());
    }
}
