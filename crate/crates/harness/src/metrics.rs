//! Metrics CSV and run summary files.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{io_err, Result};
use crate::experiment::StepRow;

pub const CSV_HEADER: &str = "step,loss,residual_norm,d_M,lambda,r_trace,step_norm,ood_flag";

/// CSV text for a run; floats use the shortest exact representation.
pub fn metrics_csv(rows: &[StepRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.loss,
            r.residual_norm,
            r.d_m,
            r.lambda,
            r.r_trace,
            r.step_norm,
            u8::from(r.ood)
        )
        .expect("writing to a String cannot fail");
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[StepRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(io_err(path))
}

pub struct Summary<'a> {
    pub config: &'a ExperimentConfig,
    pub final_accuracy: f64,
    pub steps: usize,
    pub diverged: bool,
    pub wall_ms: u128,
}

impl Summary<'_> {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# accuracy: nearest-text retrieval over held-out pairs (cosine similarity)\n");
        out.push_str(&self.config.to_text());
        writeln!(out, "final_accuracy = {}", self.final_accuracy).unwrap();
        writeln!(out, "steps = {}", self.steps).unwrap();
        writeln!(out, "diverged = {}", self.diverged).unwrap();
        writeln!(out, "wall_ms = {}", self.wall_ms).unwrap();
        out
    }
}

pub fn write_summary(path: &Path, summary: &Summary<'_>) -> Result<()> {
    std::fs::write(path, summary.to_text()).map_err(io_err(path))
}
