//! Matrix-completion state estimation.
//!
//! Each non-slack phase is one row of `Z = [P, Q, Re v, Im v, |v|]`. The
//! estimator minimizes
//!
//! ```text
//! ‖X‖* + μ‖P_Ω(Z − X)‖²_F + λ_pf (‖v(X) − M[P;Q] − v0‖² + ‖|v|(X) − K[P;Q] − |v0|‖²)
//! ```
//!
//! with ADMM (singular-value thresholding for the nuclear norm, an exact
//! quadratic step for the rest), with `μ` chosen so that the data-fit residual
//! meets `ε`.

use std::collections::BTreeSet;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::ImputationResult;
use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

pub const COLUMNS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quantity {
    P,
    Q,
    VRe,
    VIm,
    VMag,
}

impl Quantity {
    pub const ALL: [Quantity; COLUMNS] = [Quantity::P, Quantity::Q, Quantity::VRe, Quantity::VIm, Quantity::VMag];

    pub fn column(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Quantity::P => "P",
            Quantity::Q => "Q",
            Quantity::VRe => "Re(v)",
            Quantity::VIm => "Im(v)",
            Quantity::VMag => "|v|",
        }
    }
}

/// Linearized power flow `v ≈ v0 + M[P;Q]`, `|v| ≈ |v0| + K[P;Q]` over the
/// non-slack phases. P and Q are consumed (load-positive) powers in per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPFModel {
    pub m_matrix: DMatrix<C64>,
    pub k_matrix: DMatrix<f64>,
    pub v0: DVector<C64>,
    pub magnitude_offset: DVector<f64>,
}

impl LinearPFModel {
    pub fn new(m_matrix: DMatrix<C64>, k_matrix: DMatrix<f64>, v0: DVector<C64>, magnitude_offset: DVector<f64>) -> Result<Self> {
        let pf = Self { m_matrix, k_matrix, v0, magnitude_offset };
        pf.validate()?;
        Ok(pf)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.v0.len();
        let ok = self.m_matrix.shape() == (m, 2 * m)
            && self.k_matrix.shape() == (m, 2 * m)
            && self.magnitude_offset.len() == m;
        if !ok {
            return Err(Error::dims(format!(
                "pf model: M {:?}, K {:?}, v0 {}, |v0| {}",
                self.m_matrix.shape(),
                self.k_matrix.shape(),
                m,
                self.magnitude_offset.len()
            )));
        }
        Ok(())
    }

    pub fn phases(&self) -> usize {
        self.v0.len()
    }

    fn stack(p: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
        let m = p.len();
        DVector::from_fn(2 * m, |i, _| if i < m { p[i] } else { q[i - m] })
    }

    pub fn voltage(&self, p: &DVector<f64>, q: &DVector<f64>) -> DVector<C64> {
        let pq = Self::stack(p, q).map(|v| C64::new(v, 0.0));
        &self.v0 + &self.m_matrix * pq
    }

    pub fn magnitude(&self, p: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
        &self.magnitude_offset + &self.k_matrix * Self::stack(p, q)
    }

    pub fn to_file(&self) -> PfModelFile {
        let m = self.phases();
        let rows = |f: &dyn Fn(usize, usize) -> f64, cols: usize| -> Vec<Vec<f64>> {
            (0..m).map(|i| (0..cols).map(|j| f(i, j)).collect()).collect()
        };
        PfModelFile {
            phases: m,
            m_real: rows(&|i, j| self.m_matrix[(i, j)].re, 2 * m),
            m_imag: rows(&|i, j| self.m_matrix[(i, j)].im, 2 * m),
            k: rows(&|i, j| self.k_matrix[(i, j)], 2 * m),
            v0_real: self.v0.iter().map(|c| c.re).collect(),
            v0_imag: self.v0.iter().map(|c| c.im).collect(),
            magnitude_offset: self.magnitude_offset.iter().copied().collect(),
        }
    }

    pub fn from_file(f: &PfModelFile) -> Result<Self> {
        let m = f.phases;
        let mat = |rows: &Vec<Vec<f64>>, name: &str| -> Result<DMatrix<f64>> {
            if rows.len() != m || rows.iter().any(|r| r.len() != 2 * m) {
                return Err(Error::dims(format!("{name} must be {m}x{}", 2 * m)));
            }
            Ok(DMatrix::from_fn(m, 2 * m, |i, j| rows[i][j]))
        };
        let vec = |v: &Vec<f64>, name: &str| -> Result<DVector<f64>> {
            if v.len() != m {
                return Err(Error::dims(format!("{name} must have {m} entries")));
            }
            Ok(DVector::from_vec(v.clone()))
        };
        let (mr, mi) = (mat(&f.m_real, "m_real")?, mat(&f.m_imag, "m_imag")?);
        let (vr, vi) = (vec(&f.v0_real, "v0_real")?, vec(&f.v0_imag, "v0_imag")?);
        Self::new(
            DMatrix::from_fn(m, 2 * m, |i, j| C64::new(mr[(i, j)], mi[(i, j)])),
            mat(&f.k, "k")?,
            DVector::from_fn(m, |i, _| C64::new(vr[i], vi[i])),
            vec(&f.magnitude_offset, "magnitude_offset")?,
        )
    }
}

/// JSON layout of a [`LinearPFModel`]; matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PfModelFile {
    pub phases: usize,
    pub m_real: Vec<Vec<f64>>,
    pub m_imag: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v0_real: Vec<f64>,
    pub v0_imag: Vec<f64>,
    pub magnitude_offset: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

/// Radial feeder: bus 0 is the slack, buses `1..=m` are the phases of `Z`
/// (phase `i` is bus `i + 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialFeeder {
    pub buses: usize,
    pub lines: Vec<Line>,
    pub v_ref: f64,
}

impl RadialFeeder {
    pub fn phases(&self) -> usize {
        self.buses - 1
    }

    /// Parent line of every non-slack bus, checking the topology is a tree rooted at bus 0.
    pub fn parent_lines(&self) -> Result<Vec<usize>> {
        let n = self.buses;
        if n < 2 || self.lines.len() != n - 1 {
            return Err(Error::NonRadialTopology(format!("{} lines for {n} buses", self.lines.len())));
        }
        if !(self.v_ref.is_finite() && self.v_ref > 0.0) {
            return Err(Error::InvalidParameter(format!("reference voltage {}", self.v_ref)));
        }
        let mut adj = vec![Vec::new(); n];
        for (k, l) in self.lines.iter().enumerate() {
            if l.from >= n || l.to >= n || l.from == l.to {
                return Err(Error::NonRadialTopology(format!("line {k} has invalid endpoints")));
            }
            adj[l.from].push((l.to, k));
            adj[l.to].push((l.from, k));
        }
        let mut parent = vec![usize::MAX; n];
        let mut seen = vec![false; n];
        seen[0] = true;
        let mut stack = vec![0usize];
        while let Some(b) = stack.pop() {
            for &(nb, k) in &adj[b] {
                if !seen[nb] {
                    seen[nb] = true;
                    parent[nb] = k;
                    stack.push(nb);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::NonRadialTopology("feeder is not connected to the slack bus".into()));
        }
        Ok(parent)
    }

    fn parent_bus(&self, parents: &[usize], b: usize) -> usize {
        let l = self.lines[parents[b]];
        if l.to == b {
            l.from
        } else {
            l.to
        }
    }

    /// Lines on the path from the slack to each bus.
    fn paths(&self, parents: &[usize]) -> Vec<BTreeSet<usize>> {
        (0..self.buses)
            .map(|b| {
                let mut set = BTreeSet::new();
                let mut cur = b;
                while cur != 0 {
                    set.insert(parents[cur]);
                    cur = self.parent_bus(parents, cur);
                }
                set
            })
            .collect()
    }

    /// Non-slack edges as phase-index pairs, for the sensing graph.
    pub fn phase_edges(&self) -> Vec<(usize, usize)> {
        self.lines
            .iter()
            .filter(|l| l.from != 0 && l.to != 0)
            .map(|l| (l.from.min(l.to) - 1, l.from.max(l.to) - 1))
            .collect()
    }

    /// Backward/forward sweep; `s_load` are complex consumed powers per phase.
    pub fn solve_nonlinear(&self, s_load: &[C64]) -> Result<DVector<C64>> {
        let parents = self.parent_lines()?;
        let m = self.phases();
        if s_load.len() != m {
            return Err(Error::dims(format!("{} loads for {m} phases", s_load.len())));
        }
        // Buses in BFS order from the slack so that parents precede children.
        let mut order = vec![0usize];
        let mut k = 0;
        while k < order.len() {
            let b = order[k];
            for c in 1..self.buses {
                if self.parent_bus(&parents, c) == b {
                    order.push(c);
                }
            }
            k += 1;
        }
        let v_ref = C64::new(self.v_ref, 0.0);
        let mut v = vec![v_ref; self.buses];
        for _ in 0..200 {
            let mut current = vec![C64::new(0.0, 0.0); self.buses];
            for &b in order.iter().rev().filter(|&&b| b != 0) {
                current[b] += (s_load[b - 1] / v[b]).conj();
                let p = self.parent_bus(&parents, b);
                let add = current[b];
                current[p] += add;
            }
            let mut delta = 0.0_f64;
            for &b in order.iter().filter(|&&b| b != 0) {
                let l = self.lines[parents[b]];
                let new = v[self.parent_bus(&parents, b)] - C64::new(l.r, l.x) * current[b];
                delta = delta.max((new - v[b]).norm());
                v[b] = new;
            }
            if delta < 1e-15 {
                break;
            }
        }
        Ok(DVector::from_fn(m, |i, _| v[i + 1]))
    }
}

/// First-order linearization of the radial power flow around the flat, unloaded
/// operating point: `v_i ≈ v_ref − Σ_j Z_ij conj(S_j) / v_ref` for consumed `S_j`,
/// where `Z_ij` is the impedance shared by the slack-to-`i` and slack-to-`j` paths.
pub fn build_toy_pf_model(feeder: &RadialFeeder) -> Result<LinearPFModel> {
    let parents = feeder.parent_lines()?;
    let paths = feeder.paths(&parents);
    let m = feeder.phases();
    let v = feeder.v_ref;
    let mut common_r = DMatrix::zeros(m, m);
    let mut common_x = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            for &l in paths[i + 1].intersection(&paths[j + 1]) {
                common_r[(i, j)] += feeder.lines[l].r;
                common_x[(i, j)] += feeder.lines[l].x;
            }
        }
    }
    let m_matrix = DMatrix::from_fn(m, 2 * m, |i, c| {
        let j = c % m;
        let z = C64::new(common_r[(i, j)], common_x[(i, j)]) / v;
        // ∂v/∂P = −Z / v, ∂v/∂Q = jZ / v
        if c < m {
            -z
        } else {
            z * C64::new(0.0, 1.0)
        }
    });
    let k_matrix = DMatrix::from_fn(m, 2 * m, |i, c| {
        let j = c % m;
        if c < m {
            -common_r[(i, j)] / v
        } else {
            -common_x[(i, j)] / v
        }
    });
    LinearPFModel::new(
        m_matrix,
        k_matrix,
        DVector::from_element(m, C64::new(v, 0.0)),
        DVector::from_element(m, v),
    )
}

#[derive(Debug, Clone)]
pub struct DsseProblem {
    pub z: DMatrix<f64>,
    pub omega: BTreeSet<(usize, usize)>,
    pub pf: LinearPFModel,
    pub epsilon: f64,
    pub lambda_pf: f64,
}

impl DsseProblem {
    pub fn phases(&self) -> usize {
        self.z.nrows()
    }

    /// `P_Ω(X)`: keeps observed entries, zeroes the rest.
    pub fn project(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for &(r, c) in &self.omega {
            out[(r, c)] = x[(r, c)];
        }
        out
    }

    pub fn fit_residual(&self, x: &DMatrix<f64>) -> f64 {
        self.omega.iter().map(|&(r, c)| (self.z[(r, c)] - x[(r, c)]).powi(2)).sum::<f64>().sqrt()
    }

    /// `(‖v − M[P;Q] − v0‖₂, ‖|v| − K[P;Q] − |v0|‖₂)` for a candidate `X`.
    pub fn pf_residuals(&self, x: &DMatrix<f64>) -> (f64, f64) {
        let p = x.column(0).into_owned();
        let q = x.column(1).into_owned();
        let v = self.pf.voltage(&p, &q);
        let mag = self.pf.magnitude(&p, &q);
        let phasor = (0..self.phases())
            .map(|i| (C64::new(x[(i, 2)], x[(i, 3)]) - v[i]).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let magnitude = (0..self.phases()).map(|i| (x[(i, 4)] - mag[i]).powi(2)).sum::<f64>().sqrt();
        (phasor, magnitude)
    }
}

/// Copies `values[r][c]` into `Z` wherever `meter_mask[r][c]` is set.
pub fn assemble_problem(
    values: &DMatrix<f64>,
    pf: &LinearPFModel,
    meter_mask: &DMatrix<bool>,
    epsilon: f64,
    lambda_pf: f64,
) -> Result<DsseProblem> {
    let m = pf.phases();
    if values.shape() != (m, COLUMNS) || meter_mask.shape() != (m, COLUMNS) {
        return Err(Error::dims(format!(
            "values {:?} and mask {:?} must be {m}x{COLUMNS}",
            values.shape(),
            meter_mask.shape()
        )));
    }
    if !(epsilon >= 0.0 && lambda_pf >= 0.0) {
        return Err(Error::InvalidParameter("epsilon and lambda_pf must be >= 0".into()));
    }
    let mut z = DMatrix::zeros(m, COLUMNS);
    let mut omega = BTreeSet::new();
    for r in 0..m {
        for c in 0..COLUMNS {
            if meter_mask[(r, c)] {
                if !values[(r, c)].is_finite() {
                    return Err(Error::InvalidParameter(format!("metered entry ({r}, {c}) is not finite")));
                }
                z[(r, c)] = values[(r, c)];
                omega.insert((r, c));
            }
        }
    }
    Ok(DsseProblem { z, omega, pf: pf.clone(), epsilon, lambda_pf })
}

/// Per-phase snapshot of an imputation result; columns without a task are NaN.
pub fn snapshot_values(result: &ImputationResult, q: usize, task_columns: &[(usize, Quantity)]) -> DMatrix<f64> {
    let mut out = DMatrix::from_element(result.nodes, COLUMNS, f64::NAN);
    for &(task, quantity) in task_columns {
        for node in 0..result.nodes {
            out[(node, quantity.column())] = result.mean_at(task, node, q);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsseOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Initial ADMM penalty; adapted by residual balancing.
    pub rho: f64,
}

impl Default for DsseOptions {
    fn default() -> Self {
        Self { max_iter: 5000, tol: 1e-8, rho: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub nuclear_norm: f64,
    pub objective: f64,
    pub primal_residual: f64,
}

#[derive(Debug, Clone)]
pub struct DsseSolution {
    pub x_hat: DMatrix<f64>,
    pub fit_residual: f64,
    pub pf_residual_phasor: f64,
    pub pf_residual_mag: f64,
    pub nuclear_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub mu: f64,
    pub history: Vec<IterationRecord>,
}

impl DsseSolution {
    pub fn into_result(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged(self.iterations))
        }
    }

    /// Mean absolute error per column against a reference state.
    pub fn column_errors(&self, truth: &DMatrix<f64>) -> [f64; COLUMNS] {
        let m = self.x_hat.nrows() as f64;
        let mut out = [0.0; COLUMNS];
        for (c, o) in out.iter_mut().enumerate() {
            *o = (0..self.x_hat.nrows()).map(|r| (self.x_hat[(r, c)] - truth[(r, c)]).abs()).sum::<f64>() / m;
        }
        out
    }
}

pub fn nuclear_norm(x: &DMatrix<f64>) -> f64 {
    x.clone().svd(false, false).singular_values.sum()
}

/// PF coupling as `‖G x − g‖²` over `x = vec(X)` (column-major).
fn pf_system(problem: &DsseProblem) -> (DMatrix<f64>, DVector<f64>) {
    let m = problem.phases();
    let idx = |r: usize, c: usize| c * m + r;
    // Rows of G: Re residual, Im residual, magnitude residual.
    let mut g = DMatrix::zeros(3 * m, m * COLUMNS);
    let mut rhs = DVector::zeros(3 * m);
    let pf = &problem.pf;
    for i in 0..m {
        g[(i, idx(i, 2))] = 1.0;
        g[(m + i, idx(i, 3))] = 1.0;
        g[(2 * m + i, idx(i, 4))] = 1.0;
        for j in 0..m {
            g[(i, idx(j, 0))] = -pf.m_matrix[(i, j)].re;
            g[(i, idx(j, 1))] = -pf.m_matrix[(i, m + j)].re;
            g[(m + i, idx(j, 0))] = -pf.m_matrix[(i, j)].im;
            g[(m + i, idx(j, 1))] = -pf.m_matrix[(i, m + j)].im;
            g[(2 * m + i, idx(j, 0))] = -pf.k_matrix[(i, j)];
            g[(2 * m + i, idx(j, 1))] = -pf.k_matrix[(i, m + j)];
        }
        rhs[i] = pf.v0[i].re;
        rhs[m + i] = pf.v0[i].im;
        rhs[2 * m + i] = pf.magnitude_offset[i];
    }
    (g, rhs)
}

/// Proximal step for `λ‖G y − g‖² + ι{‖P_Ω(y − z)‖² ≤ ε}` with weight `ρ`.
///
/// Stationarity gives `(B + ν D) y = b + ν D z` with `B = 2λGᵀG + ρI` and
/// `D = 2·diag(Ω)`; the multiplier `ν` is located by bisection on the monotone
/// data fit. `B = LLᵀ` and the eigenpairs of `L⁻¹DL⁻ᵀ` are computed once per `ρ`
/// so each trial `ν` costs one back-substitution.
struct Prox {
    /// `L⁻ᵀ Q`
    back: DMatrix<f64>,
    /// `Qᵀ L⁻¹`
    fwd: DMatrix<f64>,
    lambda: DVector<f64>,
    pf_linear: DVector<f64>,
    dz: DVector<f64>,
    omega: Vec<usize>,
    z: DVector<f64>,
}

impl Prox {
    fn new(gtg: &DMatrix<f64>, gtr: &DVector<f64>, problem: &DsseProblem, rho: f64) -> Self {
        let m = problem.phases();
        let nv = m * COLUMNS;
        let lam = problem.lambda_pf;
        let mut b = gtg * (2.0 * lam);
        for i in 0..nv {
            b[(i, i)] += rho;
        }
        let l = b.cholesky().expect("prox system is positive definite").l();
        let l_inv = l.solve_lower_triangular(&DMatrix::identity(nv, nv)).expect("triangular inverse");
        let mut d = DMatrix::zeros(nv, nv);
        let omega: Vec<usize> = problem.omega.iter().map(|&(r, c)| c * m + r).collect();
        for &k in &omega {
            d[(k, k)] = 2.0;
        }
        let mut t = &l_inv * d * l_inv.transpose();
        crate::linalg::symmetrize(&mut t);
        let (lambda, q) = crate::linalg::sym_eigen(&t);
        let lambda = lambda.map(|v| v.max(0.0));
        let z = DVector::from_column_slice(problem.z.as_slice());
        let mut dz = DVector::zeros(nv);
        for &k in &omega {
            dz[k] = 2.0 * z[k];
        }
        Self {
            back: l_inv.transpose() * &q,
            fwd: q.transpose() * l_inv,
            lambda,
            pf_linear: gtr * (2.0 * lam),
            dz,
            omega,
            z,
        }
    }

    fn fit_sq(&self, y: &DVector<f64>) -> f64 {
        self.omega.iter().map(|&k| (y[k] - self.z[k]).powi(2)).sum()
    }

    /// Returns `(y, ν)`.
    fn apply(&self, v: &DVector<f64>, rho: f64, epsilon: f64) -> (DVector<f64>, f64) {
        let w0 = &self.fwd * (&self.pf_linear + v * rho);
        let w1 = &self.fwd * &self.dz;
        let at = |nu: f64| -> DVector<f64> {
            let w = DVector::from_fn(w0.len(), |k, _| {
                if nu.is_infinite() {
                    if self.lambda[k] > 0.0 {
                        w1[k] / self.lambda[k]
                    } else {
                        w0[k]
                    }
                } else {
                    (w0[k] + nu * w1[k]) / (1.0 + nu * self.lambda[k])
                }
            });
            &self.back * w
        };
        let y0 = at(0.0);
        if self.omega.is_empty() || self.fit_sq(&y0) <= epsilon {
            return (y0, 0.0);
        }
        if epsilon <= 0.0 {
            return (at(f64::INFINITY), f64::INFINITY);
        }
        let mut hi = 1.0;
        while self.fit_sq(&at(hi)) > epsilon {
            hi *= 10.0;
            if hi > 1e30 {
                return (at(f64::INFINITY), f64::INFINITY);
            }
        }
        let mut lo = hi / 10.0;
        if lo < 1.0 {
            lo = 0.0;
        }
        for _ in 0..60 {
            let mid = if lo == 0.0 { hi / 2.0 } else { (lo * hi).sqrt() };
            if self.fit_sq(&at(mid)) > epsilon {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-12 * hi {
                break;
            }
        }
        (at(hi), hi)
    }
}

/// Singular-value soft thresholding; also returns the thresholded singular values.
fn svt(x: &DMatrix<f64>, tau: f64) -> (DMatrix<f64>, DVector<f64>) {
    let svd = x.clone().svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let s = svd.singular_values.map(|v| (v - tau).max(0.0));
    (u * DMatrix::from_diagonal(&s) * vt, s)
}

/// ADMM on `min ‖X‖* + λ_pf·PF(Y) s.t. ‖P_Ω(Z − Y)‖² ≤ ε, X = Y`.
///
/// The data-fit constraint is the penalized term `μ‖P_Ω(Z − X)‖²` with `μ` set
/// to the multiplier that makes it active; that search runs inside each
/// proximal step, and the final multiplier is reported as `mu`.
pub fn solve(problem: &DsseProblem, options: &DsseOptions) -> Result<DsseSolution> {
    let m = problem.phases();
    if problem.z.ncols() != COLUMNS || problem.pf.phases() != m {
        return Err(Error::dims("Z must be phases x 5 and match the PF model"));
    }
    if problem.omega.iter().any(|&(r, c)| r >= m || c >= COLUMNS) {
        return Err(Error::dims("observation index out of range"));
    }
    let (g, r) = pf_system(problem);
    let gtg = g.transpose() * &g;
    let gtr = g.transpose() * &r;
    let lam = problem.lambda_pf;
    let pf_term = |x: &DMatrix<f64>| lam * (&g * DVector::from_column_slice(x.as_slice()) - &r).norm_squared();

    let mut rho = options.rho;
    let mut prox = Prox::new(&gtg, &gtr, problem, rho);
    let mut x = problem.project(&problem.z);
    let mut y = DVector::from_column_slice(x.as_slice());
    let mut u = DMatrix::zeros(m, COLUMNS);
    let mut nu = 0.0;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..options.max_iter {
        iterations = it + 1;
        let x_prev = x.clone();
        let ymat = DMatrix::from_column_slice(m, COLUMNS, y.as_slice());
        let (xn, sv) = svt(&(&ymat - &u), 1.0 / rho);
        x = xn;
        let y_prev = y.clone();
        let v = DVector::from_column_slice((&x + &u).as_slice());
        let (yn, nun) = prox.apply(&v, rho, problem.epsilon);
        y = yn;
        nu = nun;
        let ymat = DMatrix::from_column_slice(m, COLUMNS, y.as_slice());
        let resid = &x - &ymat;
        u += &resid;
        let primal = resid.norm();
        let dual = rho * (&y - &y_prev).norm();
        let scale = x.norm().max(ymat.norm()).max(1e-12);
        history.push(IterationRecord { nuclear_norm: sv.sum(), objective: sv.sum() + pf_term(&x), primal_residual: primal });
        let change = (&x - &x_prev).norm() / scale;
        if it > 0 && change < options.tol && primal < options.tol * scale && dual < options.tol * scale {
            converged = true;
            break;
        }
        // Residual balancing.
        if it % 20 == 19 {
            let factor = if primal > 10.0 * dual {
                2.0
            } else if dual > 10.0 * primal {
                0.5
            } else {
                1.0
            };
            if factor != 1.0 {
                rho *= factor;
                u /= factor;
                prox = Prox::new(&gtg, &gtr, problem, rho);
            }
        }
    }
    // Y carries the exact data-fit guarantee; X matches it to the tolerance.
    let mut out = DMatrix::from_column_slice(m, COLUMNS, y.as_slice());
    for i in 0..m {
        out[(i, 4)] = out[(i, 4)].max(0.0);
    }
    let (pf_residual_phasor, pf_residual_mag) = problem.pf_residuals(&out);
    Ok(DsseSolution {
        fit_residual: problem.fit_residual(&out),
        pf_residual_phasor,
        pf_residual_mag,
        nuclear_norm: nuclear_norm(&out),
        x_hat: out,
        iterations,
        converged,
        mu: nu,
        history,
    })
}

/// `‖X‖* + λ_pf·PF(X)` for `X` feasible in the data fit.
pub fn objective(problem: &DsseProblem, x: &DMatrix<f64>) -> f64 {
    let (ph, mg) = problem.pf_residuals(x);
    nuclear_norm(x) + problem.lambda_pf * (ph * ph + mg * mg)
}

/// One assemble + solve per requested time of a reconciled session.
pub fn estimate_states(
    session_output: &ImputationResult,
    times: &[f64],
    task_columns: &[(usize, Quantity)],
    pf: &LinearPFModel,
    meter_mask: &DMatrix<bool>,
    epsilon: f64,
    lambda_pf: f64,
    options: &DsseOptions,
) -> Result<Vec<DsseSolution>> {
    times
        .iter()
        .map(|&t| {
            let q = session_output
                .query_index(t)
                .ok_or_else(|| Error::InvalidParameter(format!("time {t} is not on the fine grid")))?;
            let values = snapshot_values(session_output, q, task_columns);
            let problem = assemble_problem(&values, pf, meter_mask, epsilon, lambda_pf)?;
            solve(&problem, options)
        })
        .collect()
}

/// Full-row meter mask for P, Q and |v| at the metered phases.
pub fn meter_mask_for(phases: usize, metered: &[usize]) -> DMatrix<bool> {
    let mut mask = DMatrix::from_element(phases, COLUMNS, false);
    for &i in metered {
        for q in [Quantity::P, Quantity::Q, Quantity::VMag] {
            mask[(i, q.column())] = true;
        }
    }
    mask
}

/// Reference state matrix from true loads through the linear model.
pub fn truth_matrix(pf: &LinearPFModel, p: &DVector<f64>, q: &DVector<f64>) -> DMatrix<f64> {
    let v = pf.voltage(p, q);
    let mag = pf.magnitude(p, q);
    DMatrix::from_fn(pf.phases(), COLUMNS, |i, c| match c {
        0 => p[i],
        1 => q[i],
        2 => v[i].re,
        3 => v[i].im,
        _ => mag[i],
    })
}

pub fn relative_error(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    (estimate - truth).norm() / truth.norm().max(f64::MIN_POSITIVE)
}
