//! One entry point for every imputation method, with per-series standardization.

use serde::{Deserialize, Serialize};

use crate::data::{BatchDataset, ImputationResult};
use crate::error::{Error, Result};
use crate::gp_batch::{self, BatchOptions};
use crate::gp_recursive::{self, BasisConfig, RecursiveMode, Schedule, SessionOptions, SessionSpec, TraceEntry};
use crate::graph::{self, FeederGraph};
use crate::kernel::{Hyperparameters, NoiseMode, TaskKernel};
use crate::simlab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    FullGp,
    Rgp,
    RgpG,
    Linear,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::FullGp => "full-gp",
            Method::Rgp => "rgp",
            Method::RgpG => "rgp-g",
            Method::Linear => "linear",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-gp" => Ok(Method::FullGp),
            "rgp" => Ok(Method::Rgp),
            "rgp-g" => Ok(Method::RgpG),
            "linear" => Ok(Method::Linear),
            other => Err(Error::Parse(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hp: Hyperparameters,
    /// Task correlation magnitude; signs come from the caller.
    pub rho: f64,
    pub alpha: f64,
    pub basis_max: usize,
    pub schedule: Schedule,
    pub noise_mode: NoiseMode,
    pub standardize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hp: Hyperparameters { lengthscale: 20.0, signal_variance: 1.0, noise_variance: 0.1 },
            rho: 0.6,
            alpha: 0.05,
            basis_max: 24,
            schedule: Schedule::Interpolation,
            noise_mode: NoiseMode::Standard,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImputeOutput {
    pub result: ImputationResult,
    pub trace_log: Vec<TraceEntry>,
}

/// Per-series `(mean, std)` of the observed values; sparse series borrow the task's pooled statistics.
pub fn series_scaling(data: &BatchDataset) -> Vec<(f64, f64)> {
    let stats = |v: &[f64]| -> Option<(f64, f64)> {
        if v.len() < 2 {
            return None;
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        let sd = var.sqrt();
        (sd > 1e-12 * mean.abs().max(1e-300)).then_some((mean, sd))
    };
    let mut out = Vec::with_capacity(data.slots());
    for task in 0..data.tasks {
        let pooled_vals: Vec<f64> = (0..data.nodes).flat_map(|n| data.series(task, n)).map(|(_, v)| v).collect();
        let pooled = stats(&pooled_vals).unwrap_or_else(|| match pooled_vals.first() {
            Some(&v) if v != 0.0 => (v, v.abs()),
            _ => (0.0, 1.0),
        });
        for node in 0..data.nodes {
            let vals: Vec<f64> = data.series(task, node).into_iter().map(|(_, v)| v).collect();
            out.push(stats(&vals).unwrap_or(pooled));
        }
    }
    out
}

fn standardized(data: &BatchDataset, scale: &[(f64, f64)]) -> BatchDataset {
    let mut out = data.clone();
    for b in &mut out.batches {
        for (s, &(m, sd)) in scale.iter().enumerate() {
            if b.mask[s] {
                b.values[s] = (b.values[s] - m) / sd;
            }
        }
    }
    out
}

fn destandardize(result: &mut ImputationResult, scale: &[(f64, f64)]) {
    let nq = result.query_times.len();
    for (s, &(m, sd)) in scale.iter().enumerate() {
        for q in 0..nq {
            let i = s * nq + q;
            result.mean[i] = m + sd * result.mean[i];
            result.variance[i] *= sd * sd;
        }
    }
    if let Some(c) = result.covariance.as_mut() {
        for r in 0..c.nrows() {
            for k in 0..c.ncols() {
                c[(r, k)] *= scale[r / nq].1 * scale[k / nq].1;
            }
        }
    }
}

pub fn impute(
    data: &BatchDataset,
    graph: Option<&FeederGraph>,
    fine_grid: &[f64],
    method: Method,
    cfg: &ModelConfig,
    task_signs: &[f64],
) -> Result<ImputeOutput> {
    data.validate()?;
    if fine_grid.is_empty() {
        return Err(Error::EmptyQuery);
    }
    if method == Method::Linear {
        return Ok(ImputeOutput { result: simlab::linear_interpolate_partial(data, fine_grid)?, trace_log: Vec::new() });
    }
    if task_signs.len() != data.tasks {
        return Err(Error::dims(format!("{} task signs for {} tasks", task_signs.len(), data.tasks)));
    }
    let task = TaskKernel::equicorrelated(task_signs, cfg.rho)?;
    let scale = if cfg.standardize { series_scaling(data) } else { vec![(0.0, 1.0); data.slots()] };
    let work = standardized(data, &scale);
    let (mut result, trace_log) = match method {
        Method::FullGp => {
            let opts = BatchOptions { noise_mode: cfg.noise_mode, full_covariance: false };
            (gp_batch::fit_predict_full(&work, fine_grid, &cfg.hp, &task, opts)?, Vec::new())
        }
        Method::Rgp | Method::RgpG => {
            let filter = match method {
                Method::RgpG => {
                    let g = graph.ok_or(Error::ModeFilterMismatch { mode: "rgp-g", reason: "requires a graph filter" })?;
                    if g.node_count() != data.nodes {
                        return Err(Error::dims(format!("graph has {} nodes, data {}", g.node_count(), data.nodes)));
                    }
                    Some(graph::make_filter(g, cfg.alpha)?)
                }
                _ => None,
            };
            let (start, end) = (fine_grid[0], fine_grid[fine_grid.len() - 1]);
            let basis = BasisConfig::observation_subset(&work, start, end, cfg.basis_max)?;
            let spec = SessionSpec {
                mode: if method == Method::RgpG { RecursiveMode::RgpG } else { RecursiveMode::Rgp },
                basis: &basis,
                hp: &cfg.hp,
                task: &task,
                filter: filter.as_ref(),
                options: SessionOptions { noise_mode: cfg.noise_mode, ..Default::default() },
            };
            let out = gp_recursive::run_session(&spec, &work, cfg.schedule, fine_grid)?;
            (out.result, out.trace_log)
        }
        Method::Linear => unreachable!(),
    };
    destandardize(&mut result, &scale);
    Ok(ImputeOutput { result, trace_log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MeasurementBatch;

    fn ramp(nodes: usize) -> BatchDataset {
        let batches = (0..20)
            .map(|t| {
                let mut b = MeasurementBatch::empty(t as f64, nodes);
                for n in 0..nodes {
                    b.set(n, 100.0 + 5.0 * n as f64 + (t as f64 / 3.0).sin() * (1.0 + n as f64));
                }
                b
            })
            .collect();
        BatchDataset::new(1, nodes, batches).unwrap()
    }

    #[test]
    fn scaling_falls_back_to_pooled() {
        let mut data = ramp(3);
        for b in &mut data.batches[1..] {
            b.clear(2);
        }
        let s = series_scaling(&data);
        assert!((s[0].0 - 100.0).abs() < 1.0);
        let pooled_mean = (0..3).flat_map(|n| data.series(0, n)).map(|(_, v)| v).sum::<f64>()
            / data.observed_count() as f64;
        assert!((s[2].0 - pooled_mean).abs() < 1e-9);
    }

    #[test]
    fn standardization_roundtrip_on_observed_points() {
        let data = ramp(2);
        let grid: Vec<f64> = (0..20).map(|t| t as f64).collect();
        let cfg = ModelConfig {
            hp: Hyperparameters::new(3.0, 1.0, 1e-6).unwrap(),
            basis_max: 20,
            ..Default::default()
        };
        let g = graph::build_laplacian(&graph::path_adjacency(2)).unwrap();
        for method in [Method::FullGp, Method::Rgp, Method::RgpG, Method::Linear] {
            let out = impute(&data, Some(&g), &grid, method, &cfg, &[1.0]).unwrap();
            for n in 0..2 {
                for (t, v) in data.series(0, n) {
                    let got = out.result.mean_at(0, n, t as usize);
                    assert!((got - v).abs() < 1e-2, "{method:?} {got} {v}");
                }
            }
        }
    }

    #[test]
    fn method_names_roundtrip() {
        for m in [Method::FullGp, Method::Rgp, Method::RgpG, Method::Linear] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("gp".parse::<Method>().is_err());
    }
}
