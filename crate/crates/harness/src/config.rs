//! Experiment configuration: one flat set of `key = value` settings.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use kalnat::{Backend, LambdaScope, RhatMethod};

use crate::data::CorruptionMode;
use crate::error::{io_err, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Kalman,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::Kalman => f.write_str("Kalman"),
            OptimizerKind::Sgd => f.write_str("SGD"),
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "kalman" => Ok(OptimizerKind::Kalman),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(format!("unknown optimizer `{other}`")),
        }
    }
}

pub const ALLOWED_SHOTS: [usize; 5] = [1, 2, 4, 8, 16];

/// Every tunable of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub classes: usize,
    pub shots: usize,
    pub test_per_class: usize,
    pub d_in: usize,
    pub d_embed: usize,
    pub rank: usize,
    /// Per-entry standard deviation of sample features around their centroid.
    pub noise: f64,
    /// Norm of the text-side modality offset relative to a centroid's norm.
    pub gap: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub q: f64,
    pub sigma0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    /// Initial observation-noise scale, R₀ = max(r0, ε)·I.
    pub r0: f64,
    pub rhat_method: RhatMethod,
    pub lambda_scope: LambdaScope,
    pub backend: Backend,
    pub ood_fraction: f64,
    pub ood_severity: f64,
    pub ood_mode: CorruptionMode,
    pub optimizer: OptimizerKind,
    pub lr: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 8,
            shots: 16,
            test_per_class: 50,
            d_in: 32,
            d_embed: 16,
            rank: 2,
            noise: 0.5,
            gap: 5.0,
            tau: 0.07,
            batch_size: 10,
            epochs: 5,
            q: 1e-4,
            sigma0: 1.0,
            alpha: 0.1,
            beta: 0.98,
            epsilon: 1e-3,
            r0: 0.5,
            rhat_method: RhatMethod::FirstOrder,
            lambda_scope: LambdaScope::Alg1,
            backend: Backend::Full,
            ood_fraction: 0.0,
            ood_severity: 3.0,
            ood_mode: CorruptionMode::FeatureNoise,
            optimizer: OptimizerKind::Kalman,
            lr: 0.001,
        }
    }
}

/// Config keys in echo order.
pub const KEYS: [&str; 26] = [
    "seed",
    "classes",
    "shots",
    "test_per_class",
    "d_in",
    "d_embed",
    "rank",
    "noise",
    "gap",
    "tau",
    "batch_size",
    "epochs",
    "q",
    "sigma0",
    "alpha",
    "beta",
    "epsilon",
    "r0",
    "rhat_method",
    "lambda_scope",
    "backend",
    "ood_fraction",
    "ood_severity",
    "ood_mode",
    "optimizer",
    "lr",
];

fn parse<T: FromStr>(field: &'static str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| HarnessError::Config {
        field,
        msg: format!("cannot parse `{value}`: {e}"),
    })
}

fn key_static(key: &str) -> Option<&'static str> {
    KEYS.iter().copied().find(|k| *k == key)
}

impl ExperimentConfig {
    /// Sets one field from its textual value. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let field = key_static(key).ok_or_else(|| HarnessError::Config {
            field: "key",
            msg: format!("unknown key `{key}`"),
        })?;
        match field {
            "seed" => self.seed = parse(field, value)?,
            "classes" => self.classes = parse(field, value)?,
            "shots" => self.shots = parse(field, value)?,
            "test_per_class" => self.test_per_class = parse(field, value)?,
            "d_in" => self.d_in = parse(field, value)?,
            "d_embed" => self.d_embed = parse(field, value)?,
            "rank" => self.rank = parse(field, value)?,
            "noise" => self.noise = parse(field, value)?,
            "gap" => self.gap = parse(field, value)?,
            "tau" => self.tau = parse(field, value)?,
            "batch_size" => self.batch_size = parse(field, value)?,
            "epochs" => self.epochs = parse(field, value)?,
            "q" => self.q = parse(field, value)?,
            "sigma0" => self.sigma0 = parse(field, value)?,
            "alpha" => self.alpha = parse(field, value)?,
            "beta" => self.beta = parse(field, value)?,
            "epsilon" => self.epsilon = parse(field, value)?,
            "r0" => self.r0 = parse(field, value)?,
            "rhat_method" => self.rhat_method = parse(field, value)?,
            "lambda_scope" => self.lambda_scope = parse(field, value)?,
            "backend" => self.backend = parse(field, value)?,
            "ood_fraction" => self.ood_fraction = parse(field, value)?,
            "ood_severity" => self.ood_severity = parse(field, value)?,
            "ood_mode" => self.ood_mode = parse(field, value)?,
            "optimizer" => self.optimizer = parse(field, value)?,
            "lr" => self.lr = parse(field, value)?,
            _ => unreachable!("KEYS and match arms agree"),
        }
        Ok(())
    }

    /// Textual value of one field, in the form [`set`](Self::set) accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "seed" => self.seed.to_string(),
            "classes" => self.classes.to_string(),
            "shots" => self.shots.to_string(),
            "test_per_class" => self.test_per_class.to_string(),
            "d_in" => self.d_in.to_string(),
            "d_embed" => self.d_embed.to_string(),
            "rank" => self.rank.to_string(),
            "noise" => self.noise.to_string(),
            "gap" => self.gap.to_string(),
            "tau" => self.tau.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "q" => self.q.to_string(),
            "sigma0" => self.sigma0.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "r0" => self.r0.to_string(),
            "rhat_method" => self.rhat_method.to_string(),
            "lambda_scope" => self.lambda_scope.to_string(),
            "backend" => self.backend.to_string(),
            "ood_fraction" => self.ood_fraction.to_string(),
            "ood_severity" => self.ood_severity.to_string(),
            "ood_mode" => self.ood_mode.to_string(),
            "optimizer" => self.optimizer.to_string(),
            "lr" => self.lr.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| HarnessError::ConfigSyntax {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse_text(&text)
    }

    /// `key = value` lines for every field; parses back to an equal config.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .filter_map(|k| self.get(k).map(|v| format!("{k} = {v}\n")))
            .collect()
    }

    /// Number of optimizer steps a full run takes.
    pub fn total_steps(&self) -> usize {
        (self.classes * self.shots / self.batch_size) * self.epochs
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(field: &'static str, msg: impl Into<String>) -> Result<()> {
            Err(HarnessError::Config { field, msg: msg.into() })
        }
        if self.classes < 1 {
            return bad("classes", "must be >= 1");
        }
        if !ALLOWED_SHOTS.contains(&self.shots) {
            return bad("shots", format!("must be one of {ALLOWED_SHOTS:?}, got {}", self.shots));
        }
        if self.test_per_class < 1 {
            return bad("test_per_class", "must be >= 1");
        }
        if self.d_in < 1 {
            return bad("d_in", "must be >= 1");
        }
        if self.d_embed < 1 {
            return bad("d_embed", "must be >= 1");
        }
        if self.rank < 1 {
            return bad("rank", "must be >= 1");
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad("noise", "must be >= 0");
        }
        if !(self.gap >= 0.0) || !self.gap.is_finite() {
            return bad("gap", "must be >= 0");
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad("tau", "must be > 0");
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be >= 1");
        }
        if self.classes * self.shots < self.batch_size {
            return bad(
                "shots",
                format!(
                    "not enough samples for one batch: {} x {} < {}",
                    self.classes, self.shots, self.batch_size
                ),
            );
        }
        if self.epochs < 1 {
            return bad("epochs", "must be >= 1");
        }
        if !(self.q >= 0.0) || !self.q.is_finite() {
            return bad("q", "must be >= 0");
        }
        if !(self.sigma0 > 0.0) || !self.sigma0.is_finite() {
            return bad("sigma0", "must be > 0");
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("alpha", "must be >= 0");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta", "must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return bad("epsilon", "must be > 0");
        }
        if !(self.r0 > 0.0) || !self.r0.is_finite() {
            return bad("r0", "must be > 0");
        }
        if !(0.0..=1.0).contains(&self.ood_fraction) {
            return bad("ood_fraction", "must lie in [0, 1]");
        }
        if !(self.ood_severity >= 0.0) || !self.ood_severity.is_finite() {
            return bad("ood_severity", "must be >= 0");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr", "must be > 0");
        }
        Ok(())
    }
}
