//! Grid sweeps over α, β, OOD fraction and shots, median over seeds.

use std::fmt::Write as _;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::experiment::{median, run_config};

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub ood_fractions: Vec<f64>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    /// A single cell at the base config's values.
    pub fn at(base: &ExperimentConfig) -> Self {
        Self {
            alphas: vec![base.alpha],
            betas: vec![base.beta],
            ood_fractions: vec![base.ood_fraction],
            shots: vec![base.shots],
            seeds: DEFAULT_SEEDS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub alpha: f64,
    pub beta: f64,
    pub ood_fraction: f64,
    pub shots: usize,
    /// Final accuracy per seed; NaN for diverged runs.
    pub accuracies: Vec<f64>,
}

impl SweepCell {
    pub fn median(&self) -> f64 {
        median(&self.accuracies)
    }

    pub fn diverged(&self) -> usize {
        self.accuracies.iter().filter(|a| a.is_nan()).count()
    }

    fn spread(&self) -> (f64, f64) {
        let finite = self.accuracies.iter().copied().filter(|a| a.is_finite());
        let lo = finite.clone().fold(f64::INFINITY, f64::min);
        let hi = finite.fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

/// Runs every cell of the cross product, sequentially, in a fixed order.
pub fn run_sweep(base: &ExperimentConfig, spec: &SweepSpec) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for &shots in &spec.shots {
        for &beta in &spec.betas {
            for &ood_fraction in &spec.ood_fractions {
                for &alpha in &spec.alphas {
                    let mut accuracies = Vec::with_capacity(spec.seeds.len());
                    for &seed in &spec.seeds {
                        let cfg = ExperimentConfig {
                            seed,
                            alpha,
                            beta,
                            ood_fraction,
                            shots,
                            ..base.clone()
                        };
                        cfg.validate()?;
                        let out = run_config(&cfg)?;
                        accuracies.push(if out.diverged { f64::NAN } else { out.final_accuracy });
                    }
                    cells.push(SweepCell {
                        alpha,
                        beta,
                        ood_fraction,
                        shots,
                        accuracies,
                    });
                }
            }
        }
    }
    Ok(cells)
}

fn fmt_acc(v: f64) -> String {
    if v.is_nan() {
        "Diverge".to_string()
    } else {
        format!("{:.2}", 100.0 * v)
    }
}

/// One CSV line per cell with median and spread.
pub fn cells_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("alpha,beta,ood_fraction,shots,median,min,max,diverged\n");
    for c in cells {
        let (lo, hi) = c.spread();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            c.alpha,
            c.beta,
            c.ood_fraction,
            c.shots,
            c.median(),
            lo,
            hi,
            c.diverged()
        )
        .unwrap();
    }
    out
}

/// Median accuracy (percent) with α down the rows and OOD fraction across,
/// one table per (β, shots) pair.
pub fn render_grid(cells: &[SweepCell]) -> String {
    let mut out = String::new();
    let mut groups: Vec<(f64, usize)> = Vec::new();
    for c in cells {
        if !groups.contains(&(c.beta, c.shots)) {
            groups.push((c.beta, c.shots));
        }
    }
    for (beta, shots) in groups {
        let group: Vec<&SweepCell> = cells.iter().filter(|c| c.beta == beta && c.shots == shots).collect();
        let mut oods: Vec<f64> = Vec::new();
        let mut alphas: Vec<f64> = Vec::new();
        for c in &group {
            if !oods.contains(&c.ood_fraction) {
                oods.push(c.ood_fraction);
            }
            if !alphas.contains(&c.alpha) {
                alphas.push(c.alpha);
            }
        }
        writeln!(out, "beta = {beta}, shots = {shots}").unwrap();
        write!(out, "{:>8}", "alpha").unwrap();
        for o in &oods {
            write!(out, " {:>9}", format!("{:.0}% OOD", 100.0 * o)).unwrap();
        }
        out.push('\n');
        for a in &alphas {
            write!(out, "{a:>8}").unwrap();
            for o in &oods {
                let cell = group.iter().find(|c| c.alpha == *a && c.ood_fraction == *o);
                let v = cell.map(|c| fmt_acc(c.median())).unwrap_or_default();
                write!(out, " {v:>9}").unwrap();
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}
