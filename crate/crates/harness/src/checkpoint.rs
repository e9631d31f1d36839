//! Plain-text optimizer checkpoints.
//!
//! ```text
//! KALNAT-CKPT v1
//! backend=<Full|Diagonal> n=<int> m=<int> step=<int>
//! <mean: n floats>
//! <cov: n*n floats row-major (Full) or n floats (Diagonal)>
//! <R: m*m floats row-major>
//! end
//! ```
//!
//! Floats are written with 17 significant digits, which round-trips every
//! `f64` exactly. Hyperparameters are not stored; they come from the run
//! configuration the checkpoint is loaded into.

use std::fmt::Write as _;
use std::path::Path;

use kalnat::{Backend, Covariance, GaussianBelief, KalmanOptimizer, NoiseState, ProcessNoise, RobustConfig};
use nalgebra::{DMatrix, DVector};

use crate::config::ExperimentConfig;
use crate::error::{io_err, HarnessError, Result};

pub const MAGIC: &str = "KALNAT-CKPT v1";
const END: &str = "end";

/// Raw checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub backend: Backend,
    pub n: usize,
    pub m: usize,
    pub step: u64,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    pub r: Vec<f64>,
}

fn fmt_err(field: &str, msg: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint {
        field: field.to_string(),
        msg: msg.into(),
    }
}

fn write_floats<'a>(out: &mut String, values: impl Iterator<Item = &'a f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        write!(out, "{v:.16e}").expect("writing to a String cannot fail");
    }
    out.push('\n');
}

impl Checkpoint {
    pub fn from_optimizer(opt: &KalmanOptimizer) -> Self {
        let belief = &opt.belief;
        let cov = match &belief.cov {
            // row-major
            Covariance::Full(s) => s.transpose().as_slice().to_vec(),
            Covariance::Diagonal(d) => d.as_slice().to_vec(),
        };
        Self {
            backend: belief.backend(),
            n: belief.dim(),
            m: opt.noise.dim(),
            step: belief.step,
            mean: belief.mean.as_slice().to_vec(),
            cov,
            r: opt.noise.r().transpose().as_slice().to_vec(),
        }
    }

    pub fn encode(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        writeln!(
            out,
            "backend={} n={} m={} step={}",
            self.backend, self.n, self.m, self.step
        )
        .expect("writing to a String cannot fail");
        write_floats(&mut out, self.mean.iter());
        write_floats(&mut out, self.cov.iter());
        write_floats(&mut out, self.r.iter());
        out.push_str(END);
        out.push('\n');
        out
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(MAGIC) => {}
            Some(other) if other.starts_with("KALNAT-CKPT") => {
                return Err(fmt_err(
                    "version",
                    format!("unsupported version `{other}`, expected `{MAGIC}`"),
                ))
            }
            Some(_) | None => return Err(fmt_err("magic", format!("missing `{MAGIC}` header"))),
        }
        let header = lines
            .next()
            .ok_or_else(|| fmt_err("header", "file truncated before header"))?;
        let mut backend = None;
        let mut n = None;
        let mut m = None;
        let mut step = None;
        for tok in header.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| fmt_err("header", format!("malformed token `{tok}`")))?;
            let bad = |field: &str| fmt_err(field, format!("cannot parse `{v}`"));
            match k {
                "backend" => backend = Some(v.parse::<Backend>().map_err(|_| bad("backend"))?),
                "n" => n = Some(v.parse::<usize>().map_err(|_| bad("n"))?),
                "m" => m = Some(v.parse::<usize>().map_err(|_| bad("m"))?),
                "step" => step = Some(v.parse::<u64>().map_err(|_| bad("step"))?),
                other => return Err(fmt_err("header", format!("unknown key `{other}`"))),
            }
        }
        let backend = backend.ok_or_else(|| fmt_err("backend", "missing"))?;
        let n = n.ok_or_else(|| fmt_err("n", "missing"))?;
        let m = m.ok_or_else(|| fmt_err("m", "missing"))?;
        let step = step.ok_or_else(|| fmt_err("step", "missing"))?;
        if n == 0 || m == 0 {
            return Err(fmt_err("header", "n and m must be positive"));
        }

        let mut read = |field: &str, expected: usize| -> Result<Vec<f64>> {
            let line = lines.next().ok_or_else(|| fmt_err(field, "file truncated"))?;
            let values = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| fmt_err(field, format!("bad float `{t}`"))))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != expected {
                return Err(fmt_err(
                    field,
                    format!("expected {expected} values, found {}", values.len()),
                ));
            }
            Ok(values)
        };
        let mean = read("mean", n)?;
        let cov_len = match backend {
            Backend::Full => n * n,
            Backend::Diagonal => n,
        };
        let cov = read("cov", cov_len)?;
        let r = read("R", m * m)?;
        match lines.next() {
            Some(END) => {}
            Some(other) => return Err(fmt_err("trailer", format!("expected `{END}`, found `{other}`"))),
            None => return Err(fmt_err("trailer", "file truncated before end marker")),
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(fmt_err("trailer", "unexpected data after end marker"));
        }
        Ok(Self {
            backend,
            n,
            m,
            step,
            mean,
            cov,
            r,
        })
    }

    /// Rebuilds an optimizer, taking hyperparameters from `cfg`.
    pub fn into_optimizer(self, cfg: &ExperimentConfig) -> Result<KalmanOptimizer> {
        if self.backend != cfg.backend {
            return Err(HarnessError::BackendMismatch {
                expected: cfg.backend.to_string(),
                found: self.backend.to_string(),
            });
        }
        if self.m != cfg.batch_size {
            return Err(fmt_err(
                "m",
                format!(
                    "checkpoint has m={}, configured batch_size is {}",
                    self.m, cfg.batch_size
                ),
            ));
        }
        let cov = match self.backend {
            Backend::Full => Covariance::Full(DMatrix::from_row_slice(self.n, self.n, &self.cov)),
            Backend::Diagonal => Covariance::Diagonal(DVector::from_vec(self.cov)),
        };
        let belief = GaussianBelief::new(DVector::from_vec(self.mean), cov, self.step)
            .map_err(|e| fmt_err("cov", e.to_string()))?;
        let noise = NoiseState::from_parts(
            DMatrix::from_row_slice(self.m, self.m, &self.r),
            cfg.beta,
            cfg.epsilon,
            cfg.rhat_method,
        )
        .map_err(|e| fmt_err("R", e.to_string()))?;
        Ok(KalmanOptimizer::new(
            belief,
            noise,
            ProcessNoise::new(cfg.q)?,
            RobustConfig::new(cfg.alpha, cfg.lambda_scope)?,
        ))
    }
}

pub fn save_checkpoint(opt: &KalmanOptimizer, path: &Path) -> Result<()> {
    std::fs::write(path, Checkpoint::from_optimizer(opt).encode()).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path, cfg: &ExperimentConfig) -> Result<KalmanOptimizer> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Checkpoint::decode(&text)?.into_optimizer(cfg)
}
