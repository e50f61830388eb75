//! Recursive multi-task GP over a fixed set of basis times, with (RGP-G) and
//! without (RGP) the graph filter in the prior.
//!
//! The state is the posterior `N(μ_f, C_f)` of the latent function at the basis
//! times, flattened `task·(M·n) + node·n + k`. Each measurement batch goes
//! through two steps:
//!
//! * inference: `J = Dᵀ A⁻¹`, `μ_p = J μ_f`, `B = F − J D`, `C_p = B + J C_f Jᵀ`;
//! * update: `G̃ = C_f Jᵀ (C_p + σ_ε² I)⁻¹`, `μ_f += G̃ (y − μ_p)`, `C_f −= G̃ J C_f`.
//!
//! `A` depends only on the basis, so it is factored once in [`init_state`].
//! In [`NoiseMode::Standard`] the basis prior is `(K_c ⊗ P) ⊗ K'` (with `P = S²`
//! or `I_M`), which makes `J = I_{dM} ⊗ (k'_t K'⁻¹)`: only the temporal block is
//! factored and the gain is stored in that compressed form.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::{BatchDataset, ImputationResult, MeasurementBatch};
use crate::error::{Error, Result};
use crate::graph::GraphFilter;
use crate::kernel::{self, Hyperparameters, NoiseMode, TaskKernel};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecursiveMode {
    Rgp,
    RgpG,
}

impl RecursiveMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rgp => "rgp",
            Self::RgpG => "rgp-g",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisPlacement {
    Uniform,
    ObservationSubset,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    times: Vec<f64>,
    placement: BasisPlacement,
}

impl BasisConfig {
    pub fn explicit(times: Vec<f64>) -> Result<Self> {
        Self::checked(times, BasisPlacement::Explicit)
    }

    /// `n` evenly spaced times spanning `[start, end]`.
    pub fn uniform(start: f64, end: f64, n: usize) -> Result<Self> {
        if n < 2 || !(end > start) {
            return Err(Error::InvalidParameter(format!("uniform basis needs n >= 2 and end > start (n={n})")));
        }
        let step = (end - start) / (n - 1) as f64;
        Self::checked((0..n).map(|i| start + step * i as f64).collect(), BasisPlacement::Uniform)
    }

    /// Observation times within `[start, end]`; falls back to `n_max` uniform
    /// points when there are more than `n_max` of them (or fewer than two).
    pub fn observation_subset(data: &BatchDataset, start: f64, end: f64, n_max: usize) -> Result<Self> {
        let times: Vec<f64> = data.observed_times().into_iter().filter(|&t| t >= start && t <= end).collect();
        if times.len() > n_max || times.len() < 2 {
            let mut u = Self::uniform(start, end, n_max.max(2))?;
            u.placement = BasisPlacement::Uniform;
            return Ok(u);
        }
        Self::checked(times, BasisPlacement::ObservationSubset)
    }

    fn checked(times: Vec<f64>, placement: BasisPlacement) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidParameter("basis is empty".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidParameter("basis times must be finite and strictly increasing".into()));
        }
        Ok(Self { times, placement })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn placement(&self) -> BasisPlacement {
        self.placement
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Linear map from the basis state to function values at query times.
#[derive(Debug, Clone)]
pub enum Gain {
    /// `I_series ⊗ W` with `W` of shape `(queries × n)`; rows ordered `series·queries + q`.
    Kron { weights: DMatrix<f64>, series: usize },
    Dense(DMatrix<f64>),
}

impl Gain {
    pub fn nrows(&self) -> usize {
        match self {
            Gain::Kron { weights, series } => series * weights.nrows(),
            Gain::Dense(m) => m.nrows(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            Gain::Kron { weights, series } => series * weights.ncols(),
            Gain::Dense(m) => m.ncols(),
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Gain::Kron { weights, series } => {
                let (nq, n) = weights.shape();
                let mut out = DVector::zeros(series * nq);
                for s in 0..*series {
                    let block = weights * v.rows(s * n, n);
                    out.rows_mut(s * nq, nq).copy_from(&block);
                }
                out
            }
            Gain::Dense(m) => m * v,
        }
    }

    /// `J · C`.
    pub fn left_mul(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Gain::Kron { weights, series } => {
                let (nq, n) = weights.shape();
                let mut out = DMatrix::zeros(series * nq, c.ncols());
                for s in 0..*series {
                    let block = weights * c.rows(s * n, n);
                    out.rows_mut(s * nq, nq).copy_from(&block);
                }
                out
            }
            Gain::Dense(m) => m * c,
        }
    }

    /// `X · Jᵀ` for `X` with `ncols() == self.ncols()`.
    pub fn right_mul_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Gain::Kron { weights, series } => {
                let (nq, n) = weights.shape();
                let mut out = DMatrix::zeros(x.nrows(), series * nq);
                for s in 0..*series {
                    let block = x.columns(s * n, n) * weights.transpose();
                    out.columns_mut(s * nq, nq).copy_from(&block);
                }
                out
            }
            Gain::Dense(m) => x * m.transpose(),
        }
    }

    /// `diag(J C Jᵀ)`; in compressed form only the diagonal series blocks of `C` are read.
    pub fn quadratic_diagonal(&self, c: &DMatrix<f64>) -> DVector<f64> {
        match self {
            Gain::Kron { weights, series } => {
                let (nq, n) = weights.shape();
                let mut out = DVector::zeros(series * nq);
                for s in 0..*series {
                    let block = c.view((s * n, s * n), (n, n));
                    let wc = weights * block;
                    for q in 0..nq {
                        out[s * nq + q] = wc.row(q).dot(&weights.row(q));
                    }
                }
                out
            }
            Gain::Dense(m) => {
                let mc = m * c;
                DVector::from_fn(m.nrows(), |r, _| mc.row(r).dot(&m.row(r)))
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Gain::Kron { weights, series } => DMatrix::identity(*series, *series).kronecker(weights),
            Gain::Dense(m) => m.clone(),
        }
    }
}

#[derive(Debug)]
enum BasisFactor {
    /// Cholesky of the jittered temporal block `K'`.
    Temporal(Cholesky<f64, Dyn>),
    /// Cholesky of the full noisy `A_g`.
    Dense(Cholesky<f64, Dyn>),
}

/// Everything that depends only on the basis and the hyperparameters.
#[derive(Debug)]
pub struct PriorModel {
    mode: RecursiveMode,
    noise_mode: NoiseMode,
    basis: Vec<f64>,
    hp: Hyperparameters,
    task: TaskKernel,
    space: DMatrix<f64>,
    /// `K_c ⊗ P`, the `(dM × dM)` cross-series factor.
    series_cov: DMatrix<f64>,
    nodes: usize,
    factor: BasisFactor,
}

impl PriorModel {
    pub fn mode(&self) -> RecursiveMode {
        self.mode
    }

    pub fn noise_mode(&self) -> NoiseMode {
        self.noise_mode
    }

    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hp
    }

    pub fn tasks(&self) -> usize {
        self.task.tasks()
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn series(&self) -> usize {
        self.tasks() * self.nodes
    }

    pub fn state_dim(&self) -> usize {
        self.series() * self.basis.len()
    }

    /// Spatial block of the prior (`S²` or `I_M`).
    pub fn space(&self) -> &DMatrix<f64> {
        &self.space
    }

    /// Gain `J` and bridge covariance `B` for function values at `times`.
    fn gain_and_bridge(&self, times: &[f64], full_bridge: bool) -> (Gain, BridgeCov) {
        let kxt = kernel::jittered_kernel_matrix(&self.basis, times, &self.hp);
        let ktt = kernel::jittered_kernel_matrix(times, times, &self.hp);
        let series = self.series();
        match &self.factor {
            BasisFactor::Temporal(chol) => {
                // W = K'(t, x) K'⁻¹, temporal residual R = K'(t, t) − W K'(x, t).
                let weights = chol.solve(&kxt).transpose();
                let mut resid = &ktt - &weights * &kxt;
                linalg::symmetrize(&mut resid);
                let bridge = BridgeCov::Kron { series_cov: self.series_cov.clone(), temporal: resid };
                (Gain::Kron { weights, series }, bridge)
            }
            BasisFactor::Dense(chol) => {
                let sigma2 = self.hp.noise_variance;
                let mut d = linalg::kron3(self.task.matrix(), &self.space, &kxt);
                if d.nrows() == d.ncols() {
                    for i in 0..d.nrows() {
                        d[(i, i)] += sigma2;
                    }
                }
                let j = chol.solve(&d).transpose();
                if !full_bridge {
                    let nq = times.len();
                    let diag = DVector::from_fn(d.ncols(), |c, _| {
                        let (s, q) = (c / nq, c % nq);
                        self.series_cov[(s, s)] * ktt[(q, q)] + sigma2 - j.row(c).dot(&d.column(c).transpose())
                    });
                    return (Gain::Dense(j), BridgeCov::Diagonal(diag));
                }
                let mut b = linalg::kron3(self.task.matrix(), &self.space, &ktt);
                for i in 0..b.nrows() {
                    b[(i, i)] += sigma2;
                }
                b -= &j * &d;
                linalg::symmetrize(&mut b);
                (Gain::Dense(j), BridgeCov::Dense(b))
            }
        }
    }
}

#[derive(Debug, Clone)]
enum BridgeCov {
    /// `(K_c ⊗ P) ⊗ R` in series-major order.
    Kron { series_cov: DMatrix<f64>, temporal: DMatrix<f64> },
    Dense(DMatrix<f64>),
    Diagonal(DVector<f64>),
}

impl BridgeCov {
    fn diagonal(&self) -> DVector<f64> {
        match self {
            BridgeCov::Kron { series_cov, temporal } => {
                let nq = temporal.nrows();
                DVector::from_fn(series_cov.nrows() * nq, |i, _| {
                    series_cov[(i / nq, i / nq)] * temporal[(i % nq, i % nq)]
                })
            }
            BridgeCov::Dense(m) => m.diagonal(),
            BridgeCov::Diagonal(d) => d.clone(),
        }
    }

    fn dense(&self) -> DMatrix<f64> {
        match self {
            BridgeCov::Kron { series_cov, temporal } => series_cov.kronecker(temporal),
            BridgeCov::Dense(m) => m.clone(),
            BridgeCov::Diagonal(d) => DMatrix::from_diagonal(d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub time: f64,
    pub trace: f64,
}

#[derive(Debug, Clone)]
pub struct RecursiveState {
    model: Arc<PriorModel>,
    pub mu_f: DVector<f64>,
    pub cov_f: DMatrix<f64>,
    step_count: usize,
    frozen_prior: Arc<DMatrix<f64>>,
    trace_log: Vec<TraceEntry>,
    last_time: Option<f64>,
}

/// Output of the inference step at one time.
#[derive(Debug, Clone)]
pub struct StepPrediction {
    pub time: f64,
    pub mu_p: DVector<f64>,
    pub cov_p: DMatrix<f64>,
    pub gain_j: Gain,
    pub bridge_b: DMatrix<f64>,
    /// `J · C_f`, reused by the update.
    gain_times_cov: DMatrix<f64>,
    step: usize,
    fingerprint: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceOutput {
    #[default]
    Marginal,
    Full,
}

/// Builds the prior and factors `A` over the basis.
pub fn init_state(
    mode: RecursiveMode,
    basis: &BasisConfig,
    hp: &Hyperparameters,
    task: &TaskKernel,
    filter: Option<&GraphFilter>,
    nodes: usize,
    noise_mode: NoiseMode,
) -> Result<RecursiveState> {
    hp.validate()?;
    let space = match (mode, filter) {
        (RecursiveMode::RgpG, Some(f)) => {
            if f.node_count() != nodes {
                return Err(Error::dims(format!("filter has {} nodes, expected {nodes}", f.node_count())));
            }
            f.squared()
        }
        (RecursiveMode::RgpG, None) => {
            return Err(Error::ModeFilterMismatch { mode: "rgp-g", reason: "requires a graph filter" })
        }
        (RecursiveMode::Rgp, Some(_)) => {
            return Err(Error::ModeFilterMismatch { mode: "rgp", reason: "does not take a graph filter" })
        }
        (RecursiveMode::Rgp, None) => DMatrix::identity(nodes, nodes),
    };
    let basis_t = basis.times().to_vec();
    let series_cov = task.matrix().kronecker(&space);
    let kb = kernel::jittered_kernel_matrix(&basis_t, &basis_t, hp);
    let frozen = linalg::kron3(task.matrix(), &space, &kb);
    let factor = match noise_mode {
        NoiseMode::Standard => BasisFactor::Temporal(linalg::cholesky(kb, "basis kernel K'")?),
        NoiseMode::PaperLiteral => {
            let mut a = frozen.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += hp.noise_variance;
            }
            BasisFactor::Dense(linalg::cholesky(a, "basis covariance A_g")?)
        }
    };
    let model = PriorModel {
        mode,
        noise_mode,
        basis: basis_t,
        hp: *hp,
        task: task.clone(),
        space,
        series_cov,
        nodes,
        factor,
    };
    if cfg!(debug_assertions) && mode == RecursiveMode::RgpG {
        if let Some(f) = filter {
            if f.alpha() > 0.0 && nodes > 1 {
                let (plain, graph) = theorem1_traces(&model);
                debug_assert!(plain > graph, "prior trace without graph {plain} <= with graph {graph}");
            }
        }
    }
    let trace = frozen.trace();
    let n = frozen.nrows();
    Ok(RecursiveState {
        model: Arc::new(model),
        mu_f: DVector::zeros(n),
        cov_f: frozen.clone(),
        step_count: 0,
        frozen_prior: Arc::new(frozen),
        trace_log: vec![TraceEntry { step: 0, time: f64::NEG_INFINITY, trace }],
        last_time: None,
    })
}

/// `(trace((K_c ⊗ I) ⊗ K'), trace((K_c ⊗ P) ⊗ K'))` for the model's basis.
pub fn theorem1_traces(model: &PriorModel) -> (f64, f64) {
    let kb = kernel::jittered_kernel_matrix(&model.basis, &model.basis, &model.hp);
    let base = model.task.matrix().trace() * kb.trace();
    (base * model.nodes as f64, base * model.space.trace())
}

impl RecursiveState {
    pub fn model(&self) -> &PriorModel {
        &self.model
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn frozen_prior(&self) -> &DMatrix<f64> {
        &self.frozen_prior
    }

    pub fn trace_log(&self) -> &[TraceEntry] {
        &self.trace_log
    }

    pub fn last_time(&self) -> Option<f64> {
        self.last_time
    }

    /// Smallest eigenvalue and largest asymmetry of `C_f` (O(N³), diagnostics only).
    pub fn covariance_health(&self) -> (f64, f64) {
        (linalg::sym_eigenvalues(&self.cov_f)[0], linalg::max_asymmetry(&self.cov_f))
    }

    /// Inference step: prior of the function at time `t` given the data so far.
    pub fn infer(&self, t: f64) -> StepPrediction {
        let (gain, bridge) = self.model.gain_and_bridge(&[t], true);
        let jc = gain.left_mul(&self.cov_f);
        let mu_p = gain.apply(&self.mu_f);
        let bridge_b = bridge.dense();
        let mut cov_p = &bridge_b + gain.right_mul_transpose(&jc);
        linalg::symmetrize(&mut cov_p);
        StepPrediction {
            time: t,
            mu_p,
            cov_p,
            gain_j: gain,
            bridge_b,
            gain_times_cov: jc,
            step: self.step_count,
            fingerprint: linalg::vector_fingerprint(&self.mu_f),
        }
    }

    /// Update step with the batch observed at `pred.time`.
    pub fn update(&mut self, pred: &StepPrediction, batch: &MeasurementBatch) -> Result<()> {
        let slots = self.model.series();
        if batch.values.len() != slots || batch.mask.len() != slots {
            return Err(Error::dims(format!("batch has {} slots, expected {slots}", batch.values.len())));
        }
        if pred.step != self.step_count || pred.fingerprint != linalg::vector_fingerprint(&self.mu_f) {
            return Err(Error::StaleStep { expected: pred.step, actual: self.step_count });
        }
        let sigma2 = self.model.hp.noise_variance;
        let rows: Vec<usize> = match self.model.noise_mode {
            NoiseMode::Standard => (0..slots).filter(|&i| batch.mask[i]).collect(),
            NoiseMode::PaperLiteral => (0..slots).collect(),
        };
        if !rows.is_empty() {
            let o = rows.len();
            let jc = pred.gain_times_cov.select_rows(&rows);
            let mut s = DMatrix::from_fn(o, o, |a, b| pred.cov_p[(rows[a], rows[b])]);
            for i in 0..o {
                s[(i, i)] += sigma2;
            }
            // Missing slots (paper-literal only reaches here with them) get y = μ_p.
            let innovation = DVector::from_fn(o, |a, _| {
                let r = rows[a];
                let y = if batch.mask[r] { batch.values[r] } else { pred.mu_p[r] };
                y - pred.mu_p[r]
            });
            let chol = linalg::cholesky(s, "innovation covariance")?;
            // G̃ᵀ = S⁻¹ (J C_f)_o
            let gain_t = chol.solve(&jc);
            self.mu_f += gain_t.transpose() * innovation;
            self.cov_f.gemm(-1.0, &jc.transpose(), &gain_t, 1.0);
            linalg::symmetrize(&mut self.cov_f);
            let worst = self.cov_f.diagonal().iter().copied().fold(f64::INFINITY, f64::min);
            if worst < -1e-8 {
                return Err(Error::FactorizationFailure(format!("negative basis variance {worst:e}")));
            }
            for i in 0..self.cov_f.nrows() {
                if self.cov_f[(i, i)] < 0.0 {
                    self.cov_f[(i, i)] = 0.0;
                }
            }
        }
        self.step_count += 1;
        self.last_time = Some(batch.time);
        self.trace_log.push(TraceEntry { step: self.step_count, time: batch.time, trace: self.cov_f.trace() });
        Ok(())
    }

    /// Posterior of the function at `query_times` given everything processed so far.
    pub fn interpolate(&self, query_times: &[f64], output: CovarianceOutput) -> Result<ImputationResult> {
        if query_times.is_empty() {
            return Err(Error::EmptyQuery);
        }
        let full = output == CovarianceOutput::Full;
        let (gain, bridge) = self.model.gain_and_bridge(query_times, full);
        let mean = gain.apply(&self.mu_f);
        let (mut variance, mut covariance) = if full {
            let mut c = bridge.dense() + gain.right_mul_transpose(&gain.left_mul(&self.cov_f));
            linalg::symmetrize(&mut c);
            (c.diagonal(), Some(c))
        } else {
            (bridge.diagonal() + gain.quadratic_diagonal(&self.cov_f), None)
        };
        crate::gp_batch::clamp_variances(&mut variance, covariance.as_mut())?;
        Ok(ImputationResult {
            tasks: self.model.tasks(),
            nodes: self.model.nodes,
            query_times: query_times.to_vec(),
            mean,
            variance,
            covariance,
        })
    }

    /// Step-ahead prediction; every query must lie after the last processed batch.
    pub fn predict_ahead(&self, query_times: &[f64], output: CovarianceOutput) -> Result<ImputationResult> {
        if let Some(last) = self.last_time {
            if let Some(&q) = query_times.iter().find(|&&q| q <= last) {
                return Err(Error::NonCausalQuery { query: q, last });
            }
        }
        self.interpolate(query_times, output)
    }
}

pub fn infer_step(state: &RecursiveState, t: f64) -> StepPrediction {
    state.infer(t)
}

pub fn update_step(mut state: RecursiveState, pred: &StepPrediction, batch: &MeasurementBatch) -> Result<RecursiveState> {
    state.update(pred, batch)?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    #[serde(rename = "interpolate")]
    Interpolation,
    #[serde(rename = "predict")]
    Prediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SessionOptions {
    pub noise_mode: NoiseMode,
    pub covariance: CovarianceOutput,
}

/// Per-batch record of the inference step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub time: f64,
    pub mu_p: DVector<f64>,
    pub var_p: DVector<f64>,
    pub observed: usize,
}

#[derive(Debug, Clone)]
pub struct SessionOutput {
    pub result: ImputationResult,
    pub trace_log: Vec<TraceEntry>,
    pub steps: Vec<StepRecord>,
    /// Prediction schedule: `(grid time, last batch time consumed before emitting it)`.
    pub emissions: Vec<(f64, Option<f64>)>,
}

/// Everything a session needs besides the data.
#[derive(Debug, Clone, Copy)]
pub struct SessionSpec<'a> {
    pub mode: RecursiveMode,
    pub basis: &'a BasisConfig,
    pub hp: &'a Hyperparameters,
    pub task: &'a TaskKernel,
    pub filter: Option<&'a GraphFilter>,
    pub options: SessionOptions,
}

impl SessionSpec<'_> {
    pub fn init(&self, nodes: usize) -> Result<RecursiveState> {
        init_state(self.mode, self.basis, self.hp, self.task, self.filter, nodes, self.options.noise_mode)
    }
}

/// Drives init/infer/update over the dataset in time order.
pub fn run_session(
    spec: &SessionSpec<'_>,
    dataset: &BatchDataset,
    schedule: Schedule,
    fine_grid: &[f64],
) -> Result<SessionOutput> {
    dataset.validate()?;
    if fine_grid.is_empty() {
        return Err(Error::EmptyQuery);
    }
    if spec.task.tasks() != dataset.tasks {
        return Err(Error::dims(format!("task kernel {} vs dataset {}", spec.task.tasks(), dataset.tasks)));
    }
    let mut state = spec.init(dataset.nodes)?;
    let mut steps = Vec::with_capacity(dataset.batches.len());
    let mut emissions = Vec::new();
    let mut segments: Vec<ImputationResult> = Vec::new();
    let mut next = 0usize;
    for batch in &dataset.batches {
        if schedule == Schedule::Prediction {
            let end = next + fine_grid[next..].iter().take_while(|&&g| g <= batch.time).count();
            if end > next {
                segments.push(state.predict_ahead(&fine_grid[next..end], CovarianceOutput::Marginal)?);
                emissions.extend(fine_grid[next..end].iter().map(|&g| (g, state.last_time())));
                next = end;
            }
        }
        let pred = state.infer(batch.time);
        steps.push(StepRecord {
            time: batch.time,
            mu_p: pred.mu_p.clone(),
            var_p: pred.cov_p.diagonal(),
            observed: batch.observed_count(),
        });
        state.update(&pred, batch)?;
    }
    let result = match schedule {
        Schedule::Interpolation => state.interpolate(fine_grid, spec.options.covariance)?,
        Schedule::Prediction => {
            if next < fine_grid.len() {
                segments.push(state.predict_ahead(&fine_grid[next..], CovarianceOutput::Marginal)?);
                emissions.extend(fine_grid[next..].iter().map(|&g| (g, state.last_time())));
            }
            stitch(&segments, dataset.tasks, dataset.nodes, fine_grid)
        }
    };
    Ok(SessionOutput { result, trace_log: state.trace_log().to_vec(), steps, emissions })
}

/// Concatenates per-segment marginal predictions into one result over the grid.
fn stitch(segments: &[ImputationResult], tasks: usize, nodes: usize, grid: &[f64]) -> ImputationResult {
    let nq = grid.len();
    let mut mean = DVector::zeros(tasks * nodes * nq);
    let mut variance = DVector::zeros(tasks * nodes * nq);
    let mut offset = 0;
    for seg in segments {
        let len = seg.query_times.len();
        for s in 0..tasks * nodes {
            for q in 0..len {
                mean[s * nq + offset + q] = seg.mean[s * len + q];
                variance[s * nq + offset + q] = seg.variance[s * len + q];
            }
        }
        offset += len;
    }
    ImputationResult { tasks, nodes, query_times: grid.to_vec(), mean, variance, covariance: None }
}
