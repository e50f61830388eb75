//! Hyperparameter selection: k-fold cross-validation over a grid, and the log
//! marginal likelihood.

use std::fmt::Write as _;

use rayon::prelude::*;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::BatchDataset;
use crate::error::{Error, Result};
use crate::gp_batch;
use crate::graph::FeederGraph;
use crate::impute::{self, Method, ModelConfig};
use crate::kernel::{Hyperparameters, NoiseMode, TaskKernel};
use crate::linalg;
use crate::simlab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub lengthscale_grid: Vec<f64>,
    pub signal_var_grid: Vec<f64>,
    pub noise_var_grid: Vec<f64>,
    pub task_corr_grid: Vec<f64>,
    pub folds: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lengthscale_grid: vec![2.0, 5.0, 10.0, 20.0, 40.0],
            signal_var_grid: vec![0.1, 0.5, 1.0, 2.0],
            noise_var_grid: vec![1e-4, 1e-3, 1e-2],
            task_corr_grid: vec![0.0, 0.3, 0.6],
            folds: 5,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lengthscale_grid.is_empty()
            || self.signal_var_grid.is_empty()
            || self.noise_var_grid.is_empty()
            || self.task_corr_grid.is_empty()
        {
            return Err(Error::InvalidParameter("every grid must be nonempty".into()));
        }
        if self.task_corr_grid.iter().any(|r| !(r.abs() < 1.0)) {
            return Err(Error::InvalidParameter("task correlations must lie in (-1, 1)".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidParameter("at least two folds are required".into()));
        }
        Ok(())
    }

    /// Candidates in canonical order: lengthscale, signal variance, noise variance, correlation.
    pub fn candidates(&self) -> Vec<Candidate> {
        let mut out = Vec::new();
        for &l in &self.lengthscale_grid {
            for &s in &self.signal_var_grid {
                for &n in &self.noise_var_grid {
                    for &rho in &self.task_corr_grid {
                        out.push(Candidate { lengthscale: l, signal_variance: s, noise_variance: n, rho });
                    }
                }
            }
        }
        out.sort_by(|a, b| a.key().partial_cmp(&b.key()).expect("finite grid values"));
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub rho: f64,
}

impl Candidate {
    fn key(&self) -> (f64, f64, f64, f64) {
        (self.lengthscale, self.signal_variance, self.noise_variance, self.rho)
    }

    pub fn hyperparameters(&self) -> Result<Hyperparameters> {
        Hyperparameters::new(self.lengthscale, self.signal_variance, self.noise_variance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub candidate: Candidate,
    pub mean_mape: Option<f64>,
    pub fold_mapes: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub best: Candidate,
    pub best_mape: f64,
    pub method: Method,
    pub folds: usize,
    pub table: Vec<CvRow>,
    pub seed: u64,
}

impl CvReport {
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>10} {:>10} {:>10} {:>6} {:>12}", "lengthscale", "signal", "noise", "rho", "mean MAPE %");
        for row in &self.table {
            let c = row.candidate;
            let m = row.mean_mape.map_or_else(|| "failed".to_string(), |v| format!("{v:.4}"));
            let mark = if c == self.best { " *" } else { "" };
            let _ = writeln!(
                s,
                "{:>10} {:>10} {:>10} {:>6} {:>12}{mark}",
                c.lengthscale, c.signal_variance, c.noise_variance, c.rho, m
            );
        }
        s
    }
}

/// Batch indices (with at least one observation) per fold, from a seeded shuffle.
pub fn fold_assignment(data: &BatchDataset, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut observed: Vec<usize> = (0..data.batches.len()).filter(|&k| data.batches[k].observed_count() > 0).collect();
    if folds < 2 || observed.len() < folds {
        return Err(Error::InsufficientData(format!("{} observed time points for {folds} folds", observed.len())));
    }
    observed.shuffle(&mut simlab::stream_rng(seed, "fold"));
    let mut out = vec![Vec::new(); folds];
    for (i, k) in observed.into_iter().enumerate() {
        out[i % folds].push(k);
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    Ok(out)
}

/// Held-out MAPE of one candidate on one fold.
fn fold_mape(
    data: &BatchDataset,
    fold: &[usize],
    graph: Option<&FeederGraph>,
    method: Method,
    cfg: &ModelConfig,
    signs: &[f64],
) -> Result<f64> {
    let train = data.without_batches(fold);
    let grid = data.times();
    let out = impute::impute(&train, graph, &grid, method, cfg, signs)?;
    let (mut est, mut tru) = (Vec::new(), Vec::new());
    for &k in fold {
        let b = &data.batches[k];
        for s in 0..data.slots() {
            if b.mask[s] {
                let e = out.result.mean_at(s / data.nodes, s % data.nodes, k);
                if e.is_finite() {
                    est.push(e);
                    tru.push(b.values[s]);
                }
            }
        }
    }
    simlab::mape(&est, &tru)
}

/// Grid search minimizing mean held-out MAPE. `base` supplies everything but
/// the searched hyperparameters.
pub fn cross_validate(
    data: &BatchDataset,
    grid: &GridSpec,
    method: Method,
    graph: Option<&FeederGraph>,
    base: &ModelConfig,
    task_signs: &[f64],
    seed: u64,
) -> Result<CvReport> {
    grid.validate()?;
    let folds = fold_assignment(data, grid.folds, seed)?;
    // Candidates are independent; collecting keeps canonical order.
    let table: Vec<CvRow> = grid
        .candidates()
        .into_par_iter()
        .map(|cand| match cand.hyperparameters() {
            Err(e) => CvRow { candidate: cand, mean_mape: None, fold_mapes: vec![], error: Some(e.to_string()) },
            Ok(hp) => {
                let cfg = ModelConfig { hp, rho: cand.rho, ..base.clone() };
                let scores: Result<Vec<f64>> =
                    folds.iter().map(|f| fold_mape(data, f, graph, method, &cfg, task_signs)).collect();
                match scores {
                    Ok(v) => CvRow {
                        candidate: cand,
                        mean_mape: Some(v.iter().sum::<f64>() / v.len() as f64),
                        fold_mapes: v,
                        error: None,
                    },
                    Err(e) => CvRow { candidate: cand, mean_mape: None, fold_mapes: vec![], error: Some(e.to_string()) },
                }
            }
        })
        .collect();
    // Strict `<` keeps the earliest canonical candidate among ties.
    let mut best: Option<(Candidate, f64)> = None;
    for row in &table {
        if let Some(m) = row.mean_mape.filter(|m| m.is_finite()) {
            if best.is_none_or(|(_, b)| m < b) {
                best = Some((row.candidate, m));
            }
        }
    }
    let (best, best_mape) = best.ok_or(Error::AllCandidatesFailed)?;
    Ok(CvReport { best, best_mape, method, folds: grid.folds, table, seed })
}

/// `−½ ỹᵀA⁻¹ỹ − ½ log det A − (N/2) log 2π` over the observed entries.
pub fn log_marginal_likelihood(data: &BatchDataset, hp: &Hyperparameters, task: &TaskKernel) -> Result<f64> {
    hp.validate()?;
    data.validate()?;
    if task.tasks() != data.tasks {
        return Err(Error::dims(format!("task kernel {} vs dataset {}", task.tasks(), data.tasks)));
    }
    if data.observed_count() == 0 {
        return Err(Error::EmptyObservations);
    }
    let (_, a, y) = gp_batch::training_system(data, hp, task, NoiseMode::Standard);
    let n = y.len() as f64;
    let chol = linalg::cholesky(a, "training covariance A")?;
    let alpha = chol.solve(&y);
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
}
