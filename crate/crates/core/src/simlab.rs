//! Synthetic feeders, load profiles, multi-rate sampling and metrics.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BatchDataset, ImputationResult, MeasurementBatch};
use crate::dsse::{self, LinearPFModel, Line, Quantity, RadialFeeder, COLUMNS};
use crate::error::{Error, Result};
use crate::graph::{self, FeederGraph, GraphOptions};

/// Targets with `|true|` below this are excluded from MAPE.
pub const MAPE_THRESHOLD: f64 = 1e-6;

/// Independent RNG stream derived from a seed and a stream name.
pub fn stream_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn mape(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::dims(format!("estimate {} vs truth {}", estimate.len(), truth.len())));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (&e, &t) in estimate.iter().zip(truth) {
        if t.abs() >= MAPE_THRESHOLD {
            sum += (e - t).abs() / t.abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::AllTargetsNearZero);
    }
    Ok(100.0 * sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoadClass {
    Residential,
    Commercial,
    Industrial,
}

/// Raised-cosine bump centred at `c` hours with half-width `w`.
fn bump(h: f64, c: f64, w: f64) -> f64 {
    let d = (h - c).abs();
    if d >= w {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * d / w).cos())
    }
}

/// 1 on `[a, b]` hours with raised-cosine ramps of length `r` on both sides.
fn plateau(h: f64, a: f64, b: f64, r: f64) -> f64 {
    if h < a - r || h > b + r {
        0.0
    } else if h < a {
        0.5 * (1.0 - (std::f64::consts::PI * (h - a + r) / r).cos())
    } else if h > b {
        0.5 * (1.0 + (std::f64::consts::PI * (h - b) / r).cos())
    } else {
        1.0
    }
}

impl LoadClass {
    /// Normalized daily shape at `minute` of the day (wraps at 1440).
    pub fn template(self, minute: f64) -> f64 {
        let h = minute.rem_euclid(1440.0) / 60.0;
        match self {
            LoadClass::Residential => 0.4 + 0.3 * bump(h, 7.5, 2.5) + 0.6 * bump(h, 19.5, 3.5),
            LoadClass::Commercial => 0.3 + 0.7 * plateau(h, 8.5, 17.5, 2.0),
            LoadClass::Industrial => 0.55 + 0.4 * plateau(h, 6.0, 22.0, 1.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    pub horizon_steps: usize,
    /// Minute of the day at step 0; one step is one minute.
    pub start_minute: f64,
    pub classes: Vec<LoadClass>,
    /// kW per node.
    pub base_load: Vec<f64>,
    pub power_factor: f64,
    pub sinusoid_amplitude_range: (f64, f64),
    /// Sinusoid period range in minutes.
    pub sinusoid_period_range: (f64, f64),
    pub noise_scale: f64,
    /// Correlation time (minutes) of the noise term.
    pub noise_correlation: f64,
    /// Graph smoothing `(I + βL)⁻¹` applied to the fluctuations across nodes.
    pub spatial_smoothing: f64,
    /// Per-unit power base in kW.
    pub s_base_kw: f64,
    pub seed: u64,
}

impl ProfileSpec {
    pub fn validate(&self, nodes: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.horizon_steps < 2 {
            return bad("horizon must be at least 2 steps".into());
        }
        if self.classes.len() != nodes || self.base_load.len() != nodes {
            return Err(Error::dims(format!(
                "{} classes and {} base loads for {nodes} nodes",
                self.classes.len(),
                self.base_load.len()
            )));
        }
        if self.base_load.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return bad("base loads must be positive".into());
        }
        if !(self.power_factor > 0.0 && self.power_factor <= 1.0) {
            return bad(format!("power factor {}", self.power_factor));
        }
        let (a0, a1) = self.sinusoid_amplitude_range;
        let (p0, p1) = self.sinusoid_period_range;
        if !(0.0 <= a0 && a0 <= a1 && a1 < 1.0) || !(0.0 < p0 && p0 <= p1) {
            return bad("sinusoid ranges must satisfy 0 <= low <= high (< 1 for amplitudes)".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_correlation > 0.0 && self.spatial_smoothing >= 0.0 && self.s_base_kw > 0.0)
        {
            return bad("noise, smoothing and base parameters must be nonnegative".into());
        }
        Ok(())
    }

    /// Mixed classes and base loads drawn from the profile stream.
    pub fn random_mix(nodes: usize, horizon_steps: usize, base_range: (f64, f64), seed: u64) -> Self {
        let mut rng = stream_rng(seed, "profile-mix");
        let all = [LoadClass::Residential, LoadClass::Commercial, LoadClass::Industrial];
        let classes = (0..nodes).map(|_| all[rng.random_range(0..3)]).collect();
        let base_load = (0..nodes).map(|_| rng.random_range(base_range.0..=base_range.1)).collect();
        Self {
            horizon_steps,
            start_minute: 600.0,
            classes,
            base_load,
            power_factor: 0.9,
            sinusoid_amplitude_range: (0.05, 0.1),
            sinusoid_period_range: (60.0, 180.0),
            noise_scale: 0.01,
            noise_correlation: 60.0,
            spatial_smoothing: 10.0,
            s_base_kw: 1000.0,
            seed,
        }
    }
}

/// Random radial feeder: phase 0 hangs off the slack, every later phase off an
/// earlier one, so the sensing graph over the phases is a connected tree.
pub fn random_radial_feeder(
    phases: usize,
    r_range: (f64, f64),
    x_over_r: (f64, f64),
    v_ref: f64,
    seed: u64,
) -> Result<RadialFeeder> {
    if phases == 0 {
        return Err(Error::InvalidParameter("feeder needs at least one phase".into()));
    }
    let mut rng = stream_rng(seed, "feeder");
    let lines = (1..=phases)
        .map(|b| {
            let from = if b == 1 { 0 } else { rng.random_range(1..b) };
            let r = rng.random_range(r_range.0..=r_range.1);
            let x = r * rng.random_range(x_over_r.0..=x_over_r.1);
            Line { from, to: b, r, x }
        })
        .collect();
    Ok(RadialFeeder { buses: phases + 1, lines, v_ref })
}

/// Sensing graph over the non-slack phases.
pub fn sensing_graph(feeder: &RadialFeeder) -> Result<FeederGraph> {
    let m = feeder.phases();
    let g = graph::build_laplacian_with(&graph::adjacency_from_edges(m, &feeder.phase_edges()), GraphOptions::default())?;
    g.with_labels((0..m).map(|i| format!("phase{}", i + 1)).collect())
}

/// Random recursive tree on `m` nodes plus up to `extra_edges` chords.
pub fn random_graph(m: usize, extra_edges: usize, seed: u64) -> Result<FeederGraph> {
    if m == 0 {
        return Err(Error::InvalidParameter("graph needs at least one node".into()));
    }
    let mut rng = stream_rng(seed, "graph");
    let mut edges: Vec<(usize, usize)> = (1..m).map(|i| (rng.random_range(0..i), i)).collect();
    let mut absent: Vec<(usize, usize)> =
        (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).filter(|e| !edges.contains(e)).collect();
    absent.shuffle(&mut rng);
    edges.extend(absent.into_iter().take(extra_edges));
    graph::build_laplacian(&graph::adjacency_from_edges(m, &edges))
}

/// Fine-grid truth for every quantity; each matrix is `M × horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub v_re: DMatrix<f64>,
    pub v_im: DMatrix<f64>,
    pub v_mag: DMatrix<f64>,
}

impl Truth {
    pub fn nodes(&self) -> usize {
        self.p.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.p.ncols()
    }

    pub fn quantity(&self, q: Quantity) -> &DMatrix<f64> {
        match q {
            Quantity::P => &self.p,
            Quantity::Q => &self.q,
            Quantity::VRe => &self.v_re,
            Quantity::VIm => &self.v_im,
            Quantity::VMag => &self.v_mag,
        }
    }

    /// `m × 5` state matrix at one step.
    pub fn state_matrix(&self, step: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.nodes(), COLUMNS, |i, c| self.quantity(Quantity::ALL[c])[(i, step)])
    }
}

pub fn generate_truth(spec: &ProfileSpec, feeder: &RadialFeeder, pf: &LinearPFModel) -> Result<Truth> {
    let m = feeder.phases();
    spec.validate(m)?;
    if pf.phases() != m {
        return Err(Error::dims(format!("pf model has {} phases, feeder {m}", pf.phases())));
    }
    let graph = sensing_graph(feeder)?;
    let smoother = graph::make_filter(&graph, spec.spatial_smoothing)?;
    let t_len = spec.horizon_steps;
    let mut rng = stream_rng(spec.seed, "profile");
    let tau = std::f64::consts::TAU;

    // Per-node sinusoid and correlated noise, then smoothed across the graph.
    let mut fluct = DMatrix::zeros(m, t_len);
    for i in 0..m {
        let (a0, a1) = spec.sinusoid_amplitude_range;
        let (p0, p1) = spec.sinusoid_period_range;
        let amp = if a1 > a0 { rng.random_range(a0..a1) } else { a0 };
        let period = if p1 > p0 { rng.random_range(p0..p1) } else { p0 };
        let phase = rng.random_range(0.0..tau);
        let rho = (-1.0 / spec.noise_correlation).exp();
        let mut e: f64 = rng.sample(StandardNormal);
        for t in 0..t_len {
            if t > 0 {
                let z: f64 = rng.sample(StandardNormal);
                e = rho * e + (1.0 - rho * rho).sqrt() * z;
            }
            fluct[(i, t)] = amp * (tau * t as f64 / period + phase).sin() + spec.noise_scale * e;
        }
    }
    let fluct = smoother.matrix() * fluct;

    let tan_phi = spec.power_factor.acos().tan();
    let p = DMatrix::from_fn(m, t_len, |i, t| {
        let minute = spec.start_minute + t as f64;
        spec.base_load[i] / spec.s_base_kw * spec.classes[i].template(minute) * (1.0 + fluct[(i, t)])
    });
    let q = &p * tan_phi;
    let mut v_re = DMatrix::zeros(m, t_len);
    let mut v_im = DMatrix::zeros(m, t_len);
    let mut v_mag = DMatrix::zeros(m, t_len);
    for t in 0..t_len {
        let pt = p.column(t).into_owned();
        let qt = q.column(t).into_owned();
        let v = pf.voltage(&pt, &qt);
        let mag = pf.magnitude(&pt, &qt);
        for i in 0..m {
            v_re[(i, t)] = v[i].re;
            v_im[(i, t)] = v[i].im;
            v_mag[(i, t)] = mag[i];
        }
    }
    Ok(Truth { p, q, v_re, v_im, v_mag })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSchedule {
    pub quantity: Quantity,
    pub period: usize,
    #[serde(default)]
    pub offset: usize,
    /// Only nodes in the meter set report this task.
    #[serde(default)]
    pub metered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSchedule {
    pub tasks: Vec<TaskSchedule>,
    pub missing_fraction: f64,
    pub fad: f64,
    pub meter_seed: u64,
    pub mask_seed: u64,
}

impl SamplingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() || self.tasks.iter().any(|t| t.period == 0) {
            return Err(Error::InvalidParameter("every task needs a period >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return Err(Error::InvalidParameter(format!("missing fraction {}", self.missing_fraction)));
        }
        if !(self.fad > 0.0 && self.fad <= 1.0) {
            return Err(Error::InvalidParameter(format!("fad {}", self.fad)));
        }
        Ok(())
    }

    /// Metered nodes: a prefix of a seeded permutation, so larger FAD sets
    /// contain smaller ones for the same seed.
    pub fn meter_set(&self, nodes: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..nodes).collect();
        order.shuffle(&mut stream_rng(self.meter_seed, "meter"));
        let count = ((self.fad * nodes as f64).round() as usize).clamp(1, nodes);
        let mut set = order[..count].to_vec();
        set.sort_unstable();
        set
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    Gaussian,
    Laplacian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub relative_std: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self { family: NoiseFamily::Gaussian, relative_std: 0.0, seed: 0 }
    }

    /// Unit-variance draw of the family.
    fn unit_draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self.family {
            NoiseFamily::Gaussian => rng.sample(StandardNormal),
            NoiseFamily::Laplacian => {
                let e: f64 = rng.sample(Exp1);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * e / std::f64::consts::SQRT_2
            }
        }
    }
}

/// Scheduled sample times of one task: block midpoints for slow tasks.
pub fn sample_times(task: &TaskSchedule, horizon: usize) -> Vec<(f64, usize)> {
    let mut out = Vec::new();
    let mut start = task.offset;
    while start + task.period <= horizon {
        out.push((start as f64 + (task.period as f64 - 1.0) / 2.0, start));
        start += task.period;
    }
    out
}

pub fn sample(truth: &Truth, schedule: &SamplingSchedule, noise: &NoiseSpec) -> Result<BatchDataset> {
    schedule.validate()?;
    if !(noise.relative_std >= 0.0) {
        return Err(Error::InvalidParameter(format!("relative std {}", noise.relative_std)));
    }
    let m = truth.nodes();
    let d = schedule.tasks.len();
    let horizon = truth.horizon();
    let meters = schedule.meter_set(m);
    let mut metered = vec![false; m];
    meters.iter().for_each(|&i| metered[i] = true);

    let mut times: Vec<f64> = schedule.tasks.iter().flat_map(|t| sample_times(t, horizon)).map(|(t, _)| t).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut batches: Vec<MeasurementBatch> = times.iter().map(|&t| MeasurementBatch::empty(t, d * m)).collect();

    let mut noise_rng = stream_rng(noise.seed, "noise");
    let mut mask_rng = stream_rng(schedule.mask_seed, "mask");
    for (k, task) in schedule.tasks.iter().enumerate() {
        let series = truth.quantity(task.quantity);
        for (stamp, start) in sample_times(task, horizon) {
            let b = times.partition_point(|&t| t < stamp);
            for node in 0..m {
                let clean = (start..start + task.period).map(|s| series[(node, s)]).sum::<f64>() / task.period as f64;
                // Draws happen for every scheduled sample so that streams stay aligned across settings.
                let z = noise.unit_draw(&mut noise_rng);
                let drop = mask_rng.random::<f64>() < schedule.missing_fraction;
                if drop || (task.metered && !metered[node]) {
                    continue;
                }
                let value = clean + noise.relative_std * clean.abs() * z;
                batches[b].set(k * m + node, value);
            }
        }
    }
    BatchDataset::new(d, m, batches)
}

/// Per-series piecewise-linear interpolation holding boundary values.
pub fn linear_interpolate(dataset: &BatchDataset, fine_grid: &[f64]) -> Result<ImputationResult> {
    interpolate_series(dataset, fine_grid, false)
}

/// As [`linear_interpolate`], but series without observations become NaN.
pub fn linear_interpolate_partial(dataset: &BatchDataset, fine_grid: &[f64]) -> Result<ImputationResult> {
    interpolate_series(dataset, fine_grid, true)
}

fn interpolate_series(dataset: &BatchDataset, fine_grid: &[f64], allow_empty: bool) -> Result<ImputationResult> {
    dataset.validate()?;
    if fine_grid.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let nq = fine_grid.len();
    let mut mean = DVector::zeros(dataset.slots() * nq);
    for task in 0..dataset.tasks {
        for node in 0..dataset.nodes {
            let pts = dataset.series(task, node);
            let base = (task * dataset.nodes + node) * nq;
            if pts.is_empty() {
                if allow_empty {
                    (0..nq).for_each(|q| mean[base + q] = f64::NAN);
                    continue;
                }
                return Err(Error::EmptySeries { task, node });
            }
            for (q, &x) in fine_grid.iter().enumerate() {
                mean[base + q] = interp(&pts, x);
            }
        }
    }
    Ok(ImputationResult {
        tasks: dataset.tasks,
        nodes: dataset.nodes,
        query_times: fine_grid.to_vec(),
        mean,
        variance: DVector::zeros(dataset.slots() * nq),
        covariance: None,
    })
}

fn interp(pts: &[(f64, f64)], x: f64) -> f64 {
    let k = pts.partition_point(|p| p.0 <= x);
    if k == 0 {
        return pts[0].1;
    }
    if k == pts.len() {
        return pts[k - 1].1;
    }
    let (x0, y0) = pts[k - 1];
    let (x1, y1) = pts[k];
    if x == x0 {
        return y0;
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// One connected area of a partition.
#[derive(Debug, Clone)]
pub struct Area {
    pub graph: FeederGraph,
    /// Original node index of each area node.
    pub nodes: Vec<usize>,
}

/// Balanced connected partition by greedy BFS growth from peripheral seeds.
pub fn partition_areas(graph: &FeederGraph, area_count: usize, seed: u64) -> Result<Vec<Area>> {
    let m = graph.node_count();
    if area_count == 0 || area_count > m {
        return Err(Error::PartitionInfeasible(format!("{area_count} areas for {m} nodes")));
    }
    let mut assigned = vec![false; m];
    let mut areas = Vec::with_capacity(area_count);
    let mut rng = stream_rng(seed, "partition");
    for k in 0..area_count {
        let remaining: Vec<usize> = (0..m).filter(|&i| !assigned[i]).collect();
        let target = (m - areas.iter().map(|a: &Vec<usize>| a.len()).sum::<usize>()) / (area_count - k);
        if k + 1 == area_count {
            areas.push(remaining);
            break;
        }
        // Candidate starts: farthest-from-centre first, random among ties.
        let ecc: Vec<usize> = remaining.iter().map(|&s| bfs_order(graph, s, &assigned).1).collect();
        let mut cands: Vec<(usize, usize, u64)> =
            remaining.iter().zip(&ecc).map(|(&s, &e)| (s, e, rng.random::<u64>())).collect();
        cands.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let mut chosen = None;
        for &(start, _, _) in &cands {
            let (order, _) = bfs_order(graph, start, &assigned);
            if order.len() < target {
                continue;
            }
            let area: Vec<usize> = order[..target].to_vec();
            let mut trial = assigned.clone();
            area.iter().for_each(|&i| trial[i] = true);
            if is_connected_within(graph, &trial) {
                chosen = Some(area);
                break;
            }
        }
        let area = chosen.ok_or_else(|| Error::PartitionInfeasible(format!("no connected area {k} of size {target}")))?;
        area.iter().for_each(|&i| assigned[i] = true);
        areas.push(area);
    }
    areas
        .into_iter()
        .map(|mut nodes| {
            nodes.sort_unstable();
            let sub = graph.subgraph(&nodes)?;
            Ok(Area { graph: sub, nodes })
        })
        .collect()
}

/// BFS order over unassigned nodes from `start`, and the eccentricity of `start`.
fn bfs_order(graph: &FeederGraph, start: usize, assigned: &[bool]) -> (Vec<usize>, usize) {
    let m = graph.node_count();
    let mut dist = vec![usize::MAX; m];
    dist[start] = 0;
    let mut order = vec![start];
    let mut k = 0;
    while k < order.len() {
        let u = order[k];
        for v in graph.neighbors(u) {
            if !assigned[v] && dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                order.push(v);
            }
        }
        k += 1;
    }
    let ecc = order.iter().map(|&v| dist[v]).max().unwrap_or(0);
    (order, ecc)
}

/// Whether the unassigned nodes form a single connected component.
fn is_connected_within(graph: &FeederGraph, assigned: &[bool]) -> bool {
    match (0..graph.node_count()).find(|&i| !assigned[i]) {
        None => true,
        Some(s) => bfs_order(graph, s, assigned).0.len() == assigned.iter().filter(|a| !**a).count(),
    }
}

/// Fine-grid truth of the dataset tasks in [`ImputationResult`] order.
pub fn truth_vector(truth: &Truth, tasks: &[Quantity], steps: &[usize]) -> DVector<f64> {
    let m = truth.nodes();
    let nq = steps.len();
    DVector::from_fn(tasks.len() * m * nq, |idx, _| {
        let (series, q) = (idx / nq, idx % nq);
        truth.quantity(tasks[series / m])[(series % m, steps[q])]
    })
}

/// MAPE of one task over all nodes and query points.
pub fn task_mape(result: &ImputationResult, truth: &Truth, task: usize, quantity: Quantity, steps: &[usize]) -> Result<f64> {
    let mut est = Vec::new();
    let mut tru = Vec::new();
    for node in 0..result.nodes {
        for (q, &s) in steps.iter().enumerate() {
            let e = result.mean_at(task, node, q);
            if e.is_finite() {
                est.push(e);
                tru.push(truth.quantity(quantity)[(node, s)]);
            }
        }
    }
    mape(&est, &tru)
}

/// Toy feeder from the DSSE examples: `phases` buses in a random radial tree.
pub fn toy_pf(phases: usize, seed: u64) -> Result<(RadialFeeder, LinearPFModel)> {
    let feeder = random_radial_feeder(phases, (0.004, 0.012), (0.5, 1.0), 1.0, seed)?;
    let pf = dsse::build_toy_pf_model(&feeder)?;
    Ok((feeder, pf))
}
