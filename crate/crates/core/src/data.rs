//! Measurement containers shared by every estimator.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One timestamp's stacked observations, indexed `task·M + node`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementBatch {
    pub time: f64,
    pub values: Vec<f64>,
    /// `true` = observed. Unobserved slots carry 0.
    pub mask: Vec<bool>,
}

impl MeasurementBatch {
    pub fn empty(time: f64, slots: usize) -> Self {
        Self { time, values: vec![0.0; slots], mask: vec![false; slots] }
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn set(&mut self, slot: usize, value: f64) {
        self.values[slot] = value;
        self.mask[slot] = true;
    }

    pub fn clear(&mut self, slot: usize) {
        self.values[slot] = 0.0;
        self.mask[slot] = false;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchDataset {
    pub tasks: usize,
    pub nodes: usize,
    pub batches: Vec<MeasurementBatch>,
}

impl BatchDataset {
    pub fn new(tasks: usize, nodes: usize, batches: Vec<MeasurementBatch>) -> Result<Self> {
        let ds = Self { tasks, nodes, batches };
        ds.validate()?;
        Ok(ds)
    }

    pub fn empty(tasks: usize, nodes: usize) -> Self {
        Self { tasks, nodes, batches: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        let slots = self.slots();
        for (k, b) in self.batches.iter().enumerate() {
            if b.values.len() != slots || b.mask.len() != slots {
                return Err(Error::dims(format!("batch {k} has {} slots, expected {slots}", b.values.len())));
            }
            if k > 0 && !(b.time > self.batches[k - 1].time) {
                return Err(Error::InvalidParameter(format!("batch times not strictly increasing at {k}")));
            }
            if b.values.iter().zip(&b.mask).any(|(v, &m)| m && !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("non-finite observed value in batch {k}")));
            }
        }
        Ok(())
    }

    pub fn slots(&self) -> usize {
        self.tasks * self.nodes
    }

    pub fn times(&self) -> Vec<f64> {
        self.batches.iter().map(|b| b.time).collect()
    }

    pub fn observed_count(&self) -> usize {
        self.batches.iter().map(MeasurementBatch::observed_count).sum()
    }

    /// Times carrying at least one observation.
    pub fn observed_times(&self) -> Vec<f64> {
        self.batches.iter().filter(|b| b.observed_count() > 0).map(|b| b.time).collect()
    }

    /// `(time, value)` pairs of one series.
    pub fn series(&self, task: usize, node: usize) -> Vec<(f64, f64)> {
        let slot = task * self.nodes + node;
        self.batches
            .iter()
            .filter(|b| b.mask[slot])
            .map(|b| (b.time, b.values[slot]))
            .collect()
    }

    /// Drops every observation at the given batch indices (kept as empty batches).
    pub fn without_batches(&self, drop: &[usize]) -> Self {
        let mut out = self.clone();
        for &k in drop {
            let slots = out.slots();
            out.batches[k] = MeasurementBatch::empty(out.batches[k].time, slots);
        }
        out
    }

    /// Batches with `time < t`.
    pub fn before(&self, t: f64) -> Self {
        Self {
            tasks: self.tasks,
            nodes: self.nodes,
            batches: self.batches.iter().filter(|b| b.time < t).cloned().collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MeasurementRecord {
    time: i64,
    task: usize,
    node: usize,
    value: Option<f64>,
    observed: u8,
}

impl BatchDataset {
    /// Long-format CSV `time,task,node,value,observed`, one row per slot and batch.
    /// Times must be integer fine-grid steps. `stamp` lines are written first and must start with `#`.
    pub fn write_csv<W: Write>(&self, mut w: W, stamp: &str) -> Result<()> {
        w.write_all(stamp.as_bytes())?;
        let mut out = csv::Writer::from_writer(w);
        for b in &self.batches {
            if b.time.fract() != 0.0 {
                return Err(Error::InvalidParameter(format!("time {} is not an integer step", b.time)));
            }
            for task in 0..self.tasks {
                for node in 0..self.nodes {
                    let s = task * self.nodes + node;
                    out.serialize(MeasurementRecord {
                        time: b.time as i64,
                        task,
                        node,
                        value: b.mask[s].then_some(b.values[s]),
                        observed: b.mask[s] as u8,
                    })?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the long format; `#` lines are skipped. Dimensions default to the largest indices seen.
    pub fn read_csv<R: Read>(r: R, dims: Option<(usize, usize)>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(r);
        let mut records = Vec::new();
        for rec in reader.deserialize() {
            let rec: MeasurementRecord = rec?;
            if rec.observed > 1 {
                return Err(Error::Parse(format!("observed must be 0 or 1, got {}", rec.observed)));
            }
            if rec.observed == 1 && !rec.value.is_some_and(f64::is_finite) {
                return Err(Error::Parse(format!("observed row at time {} has no finite value", rec.time)));
            }
            records.push(rec);
        }
        let (tasks, nodes) = match dims {
            Some(d) => d,
            None => (
                records.iter().map(|r| r.task + 1).max().unwrap_or(0),
                records.iter().map(|r| r.node + 1).max().unwrap_or(0),
            ),
        };
        let mut by_time: BTreeMap<i64, MeasurementBatch> = BTreeMap::new();
        for rec in records {
            if rec.task >= tasks || rec.node >= nodes {
                return Err(Error::dims(format!("row (task {}, node {}) outside {tasks}x{nodes}", rec.task, rec.node)));
            }
            let b = by_time.entry(rec.time).or_insert_with(|| MeasurementBatch::empty(rec.time as f64, tasks * nodes));
            let slot = rec.task * nodes + rec.node;
            if b.mask[slot] && rec.observed == 1 {
                return Err(Error::Parse(format!("duplicate observation at time {} task {} node {}", rec.time, rec.task, rec.node)));
            }
            if rec.observed == 1 {
                b.set(slot, rec.value.expect("checked above"));
            }
        }
        Self::new(tasks, nodes, by_time.into_values().collect())
    }
}

/// Posterior over `(task, node, query time)` in the global index order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationResult {
    pub tasks: usize,
    pub nodes: usize,
    pub query_times: Vec<f64>,
    pub mean: DVector<f64>,
    /// Marginal variances (diagonal of the covariance).
    pub variance: DVector<f64>,
    /// Full covariance when it was requested.
    pub covariance: Option<DMatrix<f64>>,
}

impl ImputationResult {
    pub fn index(&self, task: usize, node: usize, q: usize) -> usize {
        (task * self.nodes + node) * self.query_times.len() + q
    }

    pub fn mean_at(&self, task: usize, node: usize, q: usize) -> f64 {
        self.mean[self.index(task, node, q)]
    }

    pub fn variance_at(&self, task: usize, node: usize, q: usize) -> f64 {
        self.variance[self.index(task, node, q)]
    }

    pub fn series_mean(&self, task: usize, node: usize) -> &[f64] {
        let n = self.query_times.len();
        let start = (task * self.nodes + node) * n;
        &self.mean.as_slice()[start..start + n]
    }

    pub fn total_variance(&self) -> f64 {
        self.variance.sum()
    }

    /// Values at one query index as an `M`-per-task snapshot `[task][node]`.
    pub fn snapshot(&self, q: usize) -> Vec<Vec<f64>> {
        (0..self.tasks)
            .map(|t| (0..self.nodes).map(|v| self.mean_at(t, v, q)).collect())
            .collect()
    }

    pub fn query_index(&self, time: f64) -> Option<usize> {
        self.query_times.iter().position(|&t| t == time)
    }

    /// CSV `time,task,node,mean,variance` after the `stamp` lines.
    pub fn write_csv<W: Write>(&self, mut w: W, stamp: &str) -> Result<()> {
        w.write_all(stamp.as_bytes())?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["time", "task", "node", "mean", "variance"])?;
        for task in 0..self.tasks {
            for node in 0..self.nodes {
                for (q, t) in self.query_times.iter().enumerate() {
                    out.write_record([
                        t.to_string(),
                        task.to_string(),
                        node.to_string(),
                        self.mean_at(task, node, q).to_string(),
                        self.variance_at(task, node, q).to_string(),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BatchDataset {
        let mut a = MeasurementBatch::empty(0.0, 4);
        a.set(0, 1.5);
        a.set(3, -0.25);
        let mut b = MeasurementBatch::empty(15.0, 4);
        b.set(1, 0.1 + 0.2);
        BatchDataset::new(2, 2, vec![a, b]).unwrap()
    }

    #[test]
    fn measurement_csv_roundtrip() {
        let ds = sample();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf, "# seed=1\n").unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# seed=1\ntime,task,node,value,observed\n"));
        assert_eq!(BatchDataset::read_csv(&buf[..], None).unwrap(), ds);
    }

    #[test]
    fn measurement_csv_rejects_bad_rows() {
        let dup = "time,task,node,value,observed\n0,0,0,1,1\n0,0,0,2,1\n";
        assert!(BatchDataset::read_csv(dup.as_bytes(), None).is_err());
        let missing_value = "time,task,node,value,observed\n0,0,0,,1\n";
        assert!(BatchDataset::read_csv(missing_value.as_bytes(), None).is_err());
        let outside = "time,task,node,value,observed\n0,2,0,1,1\n";
        assert!(BatchDataset::read_csv(outside.as_bytes(), Some((1, 1))).is_err());
    }

    #[test]
    fn fractional_time_is_rejected_on_write() {
        let ds = BatchDataset::new(1, 1, vec![MeasurementBatch::empty(0.5, 1)]).unwrap();
        assert!(ds.write_csv(Vec::new(), "").is_err());
    }
}
