//! Sensing graph, Laplacian, the Tikhonov smoothing filter `(I + αL)^-1`, and
//! the topology-perturbation stability check.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Connectivity threshold on the second-smallest Laplacian eigenvalue.
pub const CONNECTIVITY_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphOptions {
    pub allow_disconnected: bool,
    /// Accept non-negative real weights instead of {0, 1}.
    pub weighted: bool,
}

#[derive(Debug, Clone)]
pub struct FeederGraph {
    adjacency: DMatrix<f64>,
    laplacian: DMatrix<f64>,
    labels: Vec<String>,
    eigenvalues: DVector<f64>,
}

impl FeederGraph {
    pub fn node_count(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Laplacian eigenvalues, ascending.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn is_connected(&self) -> bool {
        self.eigenvalues.len() < 2 || self.eigenvalues[1] > CONNECTIVITY_EPS
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.node_count() {
            return Err(Error::dims(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.node_count()
            )));
        }
        self.labels = labels;
        Ok(self)
    }

    /// Undirected edge list `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.node_count();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if self.adjacency[(i, j)] != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.node_count()).filter(move |&j| self.adjacency[(i, j)] != 0.0)
    }

    /// Induced subgraph on `nodes` (in the given order). Connectivity is not enforced.
    pub fn subgraph(&self, nodes: &[usize]) -> Result<FeederGraph> {
        let k = nodes.len();
        let adj = DMatrix::from_fn(k, k, |i, j| self.adjacency[(nodes[i], nodes[j])]);
        let labels = nodes.iter().map(|&i| self.labels[i].clone()).collect();
        build_laplacian_with(&adj, GraphOptions { allow_disconnected: true, weighted: true })?
            .with_labels(labels)
    }

    /// Reads an edge-list CSV with header `from,to`; `#` lines are comments.
    /// Node indices follow sorted label order, numeric when every label is an integer.
    pub fn from_edge_csv<R: Read>(reader: R, options: GraphOptions) -> Result<FeederGraph> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "from" || &headers[1] != "to" {
            return Err(Error::Parse(format!("edge list header must be `from,to`, got {headers:?}")));
        }
        let mut pairs = Vec::new();
        let mut labels = BTreeSet::new();
        for rec in rdr.records() {
            let rec = rec?;
            let (a, b) = (rec[0].to_string(), rec[1].to_string());
            labels.insert(a.clone());
            labels.insert(b.clone());
            pairs.push((a, b));
        }
        let mut labels: Vec<String> = labels.into_iter().collect();
        if labels.iter().all(|l| l.parse::<u64>().is_ok()) {
            labels.sort_by_key(|l| l.parse::<u64>().unwrap());
        }
        let positions: std::collections::HashMap<&str, usize> =
            labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let index = |s: &str| positions[s];
        let n = labels.len();
        let mut adj = DMatrix::zeros(n, n);
        for (a, b) in &pairs {
            let (i, j) = (index(a), index(b));
            adj[(i, j)] = 1.0;
            adj[(j, i)] = 1.0;
        }
        build_laplacian_with(&adj, options)?.with_labels(labels)
    }

    /// Writes the Laplacian row-major with 17 significant digits.
    pub fn write_laplacian_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for row in self.laplacian.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

pub fn build_laplacian(adjacency: &DMatrix<f64>) -> Result<FeederGraph> {
    build_laplacian_with(adjacency, GraphOptions::default())
}

pub fn build_laplacian_with(adjacency: &DMatrix<f64>, options: GraphOptions) -> Result<FeederGraph> {
    let (rows, cols) = adjacency.shape();
    if rows != cols || rows == 0 {
        return Err(Error::NotSquare { rows, cols });
    }
    for i in 0..rows {
        if adjacency[(i, i)] != 0.0 {
            return Err(Error::SelfLoop(i));
        }
        for j in 0..rows {
            let a = adjacency[(i, j)];
            let ok = if options.weighted { a.is_finite() && a >= 0.0 } else { a == 0.0 || a == 1.0 };
            if !ok {
                return Err(Error::NonBinary(i, j));
            }
            if a != adjacency[(j, i)] {
                return Err(Error::NonSymmetric(i, j));
            }
        }
    }
    let degrees = DVector::from_iterator(rows, adjacency.row_iter().map(|r| r.sum()));
    let laplacian = DMatrix::from_diagonal(&degrees) - adjacency;
    let eigenvalues = linalg::sym_eigenvalues(&laplacian);
    if rows > 1 && eigenvalues[1] <= CONNECTIVITY_EPS && !options.allow_disconnected {
        return Err(Error::Disconnected(eigenvalues[1]));
    }
    Ok(FeederGraph {
        adjacency: adjacency.clone(),
        laplacian,
        labels: (0..rows).map(|i| i.to_string()).collect(),
        eigenvalues,
    })
}

/// `S = (I + αL)^-1`.
#[derive(Debug, Clone)]
pub struct GraphFilter {
    alpha: f64,
    matrix_s: DMatrix<f64>,
    source_laplacian_digest: String,
}

impl GraphFilter {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix_s
    }

    pub fn node_count(&self) -> usize {
        self.matrix_s.nrows()
    }

    pub fn source_laplacian_digest(&self) -> &str {
        &self.source_laplacian_digest
    }

    /// `S²`, the spatial block of the graph-aware prior.
    pub fn squared(&self) -> DMatrix<f64> {
        let mut s2 = &self.matrix_s * &self.matrix_s;
        linalg::symmetrize(&mut s2);
        s2
    }
}

pub fn make_filter(graph: &FeederGraph, alpha: f64) -> Result<GraphFilter> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidParameter(format!("alpha must be >= 0, got {alpha}")));
    }
    let m = graph.node_count();
    let system = DMatrix::identity(m, m) + graph.laplacian() * alpha;
    let chol = system
        .cholesky()
        .ok_or_else(|| Error::SingularSystem("I + alpha L is not positive definite".into()))?;
    let mut s = chol.inverse();
    linalg::symmetrize(&mut s);
    Ok(GraphFilter {
        alpha,
        matrix_s: s,
        source_laplacian_digest: linalg::matrix_digest(graph.laplacian()),
    })
}

/// Minimizer of `‖y − x‖² + α xᵀLx`, i.e. `S·y`.
pub fn smooth_signal(filter: &GraphFilter, y: &DVector<f64>) -> Result<DVector<f64>> {
    if y.len() != filter.node_count() {
        return Err(Error::dims(format!("signal length {} vs {} nodes", y.len(), filter.node_count())));
    }
    Ok(&filter.matrix_s * y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub filter_gap: f64,
    pub laplacian_gap: f64,
    pub bound_satisfied: bool,
}

/// Compares `‖S_a − S_b‖₂` with `α‖L_a − L_b‖₂`.
pub fn stability_gap(a: &FeederGraph, b: &FeederGraph, alpha: f64) -> Result<StabilityReport> {
    if a.node_count() != b.node_count() {
        return Err(Error::dims(format!("{} vs {} nodes", a.node_count(), b.node_count())));
    }
    let fa = make_filter(a, alpha)?;
    let fb = make_filter(b, alpha)?;
    let filter_gap = linalg::spectral_norm_sym(&(fa.matrix() - fb.matrix()));
    let laplacian_gap = linalg::spectral_norm_sym(&(a.laplacian() - b.laplacian()));
    Ok(StabilityReport {
        filter_gap,
        laplacian_gap,
        bound_satisfied: filter_gap <= alpha * laplacian_gap + 1e-9,
    })
}

/// Path graph on `m` nodes.
pub fn path_adjacency(m: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(m, m);
    for i in 1..m {
        a[(i - 1, i)] = 1.0;
        a[(i, i - 1)] = 1.0;
    }
    a
}

/// Adjacency from an undirected edge list.
pub fn adjacency_from_edges(m: usize, edges: &[(usize, usize)]) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(m, m);
    for &(i, j) in edges {
        a[(i, j)] = 1.0;
        a[(j, i)] = 1.0;
    }
    a
}
