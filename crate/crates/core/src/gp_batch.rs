//! Full (batch) multi-task GP imputation.
//!
//! The prior is `(K_c ⊗ I_M) ⊗ K` over every observed `(task, node, time)`;
//! the posterior at the query grid is `m* = Dᵀ A⁻¹ ỹ`, `C* = F − Dᵀ A⁻¹ D`.
//! Cost is cubic in the number of observations, which is why this module is
//! the reference the recursive estimators are checked against rather than a
//! production path.

use nalgebra::{DMatrix, DVector};

use crate::data::{BatchDataset, ImputationResult};
use crate::error::{Error, Result};
use crate::kernel::{self, Hyperparameters, NoiseMode, TaskKernel};
use crate::linalg;

/// Query columns processed per chunk when only marginals are needed.
const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BatchOptions {
    pub noise_mode: NoiseMode,
    pub full_covariance: bool,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Entry {
    task: usize,
    node: usize,
    time: f64,
    value: f64,
}

fn training_entries(data: &BatchDataset, mode: NoiseMode) -> Vec<Entry> {
    // Global (task, node, time) order so that paper-literal `ỹ` lines up with `vec(·)`.
    let mut out = Vec::new();
    for task in 0..data.tasks {
        for node in 0..data.nodes {
            let slot = task * data.nodes + node;
            for b in &data.batches {
                let observed = b.mask[slot];
                if observed || mode == NoiseMode::PaperLiteral {
                    out.push(Entry { task, node, time: b.time, value: if observed { b.values[slot] } else { 0.0 } });
                }
            }
        }
    }
    out
}

/// Training entries, `A = K_train + σ_ε² I` and `ỹ`.
pub(crate) fn training_system(
    data: &BatchDataset,
    hp: &Hyperparameters,
    task: &TaskKernel,
    mode: NoiseMode,
) -> (Vec<Entry>, DMatrix<f64>, DVector<f64>) {
    let kc = task.matrix();
    let entries = training_entries(data, mode);
    let n_obs = entries.len();
    let j = hp.jitter();
    let k = |a: f64, b: f64| kernel::rbf(a, b, hp) + if a == b { j } else { 0.0 };
    let mut a = DMatrix::from_fn(n_obs, n_obs, |r, c| {
        let (er, ec) = (entries[r], entries[c]);
        if er.node != ec.node {
            0.0
        } else {
            kc[(er.task, ec.task)] * k(er.time, ec.time)
        }
    });
    for i in 0..n_obs {
        a[(i, i)] += hp.noise_variance;
    }
    let y = DVector::from_iterator(n_obs, entries.iter().map(|e| e.value));
    (entries, a, y)
}

pub fn fit_predict_full(
    data: &BatchDataset,
    query_times: &[f64],
    hp: &Hyperparameters,
    task: &TaskKernel,
    options: BatchOptions,
) -> Result<ImputationResult> {
    hp.validate()?;
    data.validate()?;
    if task.tasks() != data.tasks {
        return Err(Error::dims(format!("task kernel {} vs dataset {}", task.tasks(), data.tasks)));
    }
    if query_times.is_empty() {
        return Err(Error::EmptyQuery);
    }
    if data.observed_count() == 0 {
        return Err(Error::EmptyObservations);
    }
    let kc = task.matrix();
    let (entries, a, y) = training_system(data, hp, task, options.noise_mode);
    let n_obs = entries.len();
    let (d, m, nq) = (data.tasks, data.nodes, query_times.len());
    let q_dim = d * m * nq;
    let j = hp.jitter();
    let k = |a: f64, b: f64| kernel::rbf(a, b, hp) + if a == b { j } else { 0.0 };
    let chol = linalg::cholesky(a, "training covariance A")?;
    let alpha = chol.solve(&y);

    let literal_square = options.noise_mode == NoiseMode::PaperLiteral && n_obs == q_dim;
    let cross_column = |col: usize| -> DVector<f64> {
        let (series, qi) = (col / nq, col % nq);
        let (qt, qn) = (series / m, series % m);
        let xq = query_times[qi];
        DVector::from_fn(n_obs, |r, _| {
            let e = entries[r];
            let mut v = if e.node != qn { 0.0 } else { kc[(e.task, qt)] * k(e.time, xq) };
            if literal_square && r == col {
                v += hp.noise_variance;
            }
            v
        })
    };
    let prior_entry = |r: usize, c: usize| -> f64 {
        let (sr, qr) = (r / nq, r % nq);
        let (sc, qc) = (c / nq, c % nq);
        let (tr, nr) = (sr / m, sr % m);
        let (tc, ncol) = (sc / m, sc % m);
        let mut v = if nr != ncol { 0.0 } else { kc[(tr, tc)] * k(query_times[qr], query_times[qc]) };
        if options.noise_mode == NoiseMode::PaperLiteral && r == c {
            v += hp.noise_variance;
        }
        v
    };

    let mut mean = DVector::zeros(q_dim);
    let mut variance = DVector::zeros(q_dim);
    let mut covariance = None;
    if options.full_covariance {
        let dm = DMatrix::from_fn(n_obs, q_dim, |r, c| cross_column(c)[r]);
        mean = dm.transpose() * &alpha;
        let v = chol.l().solve_lower_triangular(&dm).expect("triangular solve");
        let mut cov = DMatrix::from_fn(q_dim, q_dim, prior_entry) - v.transpose() * v;
        linalg::symmetrize(&mut cov);
        variance = cov.diagonal();
        covariance = Some(cov);
    } else {
        let mut start = 0;
        while start < q_dim {
            let width = CHUNK.min(q_dim - start);
            let mut dm = DMatrix::zeros(n_obs, width);
            for c in 0..width {
                dm.set_column(c, &cross_column(start + c));
            }
            let mc = dm.transpose() * &alpha;
            let v = chol.l().solve_lower_triangular(&dm).expect("triangular solve");
            for c in 0..width {
                mean[start + c] = mc[c];
                variance[start + c] = prior_entry(start + c, start + c) - v.column(c).norm_squared();
            }
            start += width;
        }
    }
    clamp_variances(&mut variance, covariance.as_mut())?;
    Ok(ImputationResult { tasks: d, nodes: m, query_times: query_times.to_vec(), mean, variance, covariance })
}

/// Checks the posterior diagonal is not materially negative, then clamps it at zero.
pub(crate) fn clamp_variances(variance: &mut DVector<f64>, cov: Option<&mut DMatrix<f64>>) -> Result<()> {
    if let Some(worst) = variance.iter().copied().reduce(f64::min) {
        if worst < -1e-8 {
            return Err(Error::FactorizationFailure(format!("negative posterior variance {worst:e}")));
        }
    }
    variance.iter_mut().for_each(|v| *v = v.max(0.0));
    if let Some(c) = cov {
        for i in 0..c.nrows() {
            c[(i, i)] = c[(i, i)].max(0.0);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MeasurementBatch;

    fn single_series(times: &[f64], values: &[f64]) -> BatchDataset {
        let batches = times
            .iter()
            .zip(values)
            .map(|(&t, &v)| MeasurementBatch { time: t, values: vec![v], mask: vec![true] })
            .collect();
        BatchDataset::new(1, 1, batches).unwrap()
    }

    #[test]
    fn interpolates_single_point_with_vanishing_noise() {
        let hp = Hyperparameters::new(3.0, 1.0, 1e-12).unwrap();
        let data = single_series(&[4.0], &[2.5]);
        let r = fit_predict_full(&data, &[4.0], &hp, &TaskKernel::identity(1), BatchOptions::default()).unwrap();
        assert!((r.mean[0] - 2.5).abs() < 1e-6);
    }

    #[test]
    fn zero_data_gives_zero_mean() {
        let hp = Hyperparameters::default();
        let data = single_series(&[0.0, 1.0, 2.0], &[0.0, 0.0, 0.0]);
        let r = fit_predict_full(&data, &[0.5, 1.5, 7.0], &hp, &TaskKernel::identity(1), BatchOptions::default()).unwrap();
        assert!(r.mean.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_empty_inputs() {
        let hp = Hyperparameters::default();
        let mut data = single_series(&[0.0], &[1.0]);
        assert!(matches!(
            fit_predict_full(&data, &[], &hp, &TaskKernel::identity(1), BatchOptions::default()),
            Err(Error::EmptyQuery)
        ));
        data.batches[0].clear(0);
        assert!(matches!(
            fit_predict_full(&data, &[0.0], &hp, &TaskKernel::identity(1), BatchOptions::default()),
            Err(Error::EmptyObservations)
        ));
    }

    #[test]
    fn missing_entries_are_dropped_not_zero_filled() {
        let hp = Hyperparameters::new(2.0, 1.0, 1e-4).unwrap();
        let mut data = single_series(&[0.0, 1.0, 2.0], &[3.0, 3.0, 3.0]);
        data.batches[1].clear(0);
        let std = fit_predict_full(&data, &[1.0], &hp, &TaskKernel::identity(1), BatchOptions::default()).unwrap();
        let literal = BatchOptions { noise_mode: NoiseMode::PaperLiteral, full_covariance: false };
        let lit = fit_predict_full(&data, &[1.0], &hp, &TaskKernel::identity(1), literal).unwrap();
        // Dropping keeps the estimate near 3; a fictitious zero drags it down.
        assert!(std.mean[0] > 2.5);
        assert!(lit.mean[0] < std.mean[0] - 0.5);
    }

    #[test]
    fn full_and_marginal_paths_agree() {
        let hp = Hyperparameters::new(1.5, 0.8, 1e-2).unwrap();
        let mut batches = Vec::new();
        for t in 0..6 {
            let mut b = MeasurementBatch::empty(t as f64, 4);
            for s in 0..4 {
                if (t + s) % 3 != 0 {
                    b.set(s, ((t * 7 + s * 3) % 5) as f64 - 2.0);
                }
            }
            batches.push(b);
        }
        let data = BatchDataset::new(2, 2, batches).unwrap();
        let task = TaskKernel::equicorrelated(&[1.0, -1.0], 0.4).unwrap();
        let q = [0.5, 2.0, 4.5];
        let a = fit_predict_full(&data, &q, &hp, &task, BatchOptions { full_covariance: true, ..Default::default() }).unwrap();
        let b = fit_predict_full(&data, &q, &hp, &task, BatchOptions::default()).unwrap();
        assert!((&a.mean - &b.mean).amax() < 1e-12);
        assert!((&a.variance - &b.variance).amax() < 1e-12);
        assert!(linalg::max_asymmetry(a.covariance.as_ref().unwrap()) < 1e-14);
    }
}
