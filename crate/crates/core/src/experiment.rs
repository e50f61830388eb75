//! Seeded end-to-end runs: truth, sampling, imputation by each method, MAPE
//! tables, and optionally matrix-completion state estimation.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsse::{self, DsseOptions, DsseSolution, Quantity, COLUMNS};
use crate::error::{Error, Result};
use crate::gp_recursive::Schedule;
use crate::hyper::{self, GridSpec};
use crate::impute::{self, Method, ModelConfig};
use crate::kernel::{Hyperparameters, NoiseMode};
use crate::simlab::{self, NoiseFamily, NoiseSpec, ProfileSpec, SamplingSchedule, TaskSchedule, Truth};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeederSection {
    pub phases: usize,
    pub r_range: (f64, f64),
    pub x_over_r: (f64, f64),
    pub v_ref: f64,
    /// Fixed feeder seed; each run seed draws its own feeder when absent.
    pub seed: Option<u64>,
}

impl Default for FeederSection {
    fn default() -> Self {
        Self { phases: 12, r_range: (0.01, 0.03), x_over_r: (0.5, 1.0), v_ref: 1.0, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    pub horizon_steps: usize,
    pub start_minute: f64,
    pub base_load_range: (f64, f64),
    pub power_factor: f64,
    pub sinusoid_amplitude_range: (f64, f64),
    pub sinusoid_period_range: (f64, f64),
    pub noise_scale: f64,
    pub noise_correlation: f64,
    pub spatial_smoothing: f64,
    pub s_base_kw: f64,
}

impl Default for ProfileSection {
    fn default() -> Self {
        let p = ProfileSpec::random_mix(1, 180, (50.0, 200.0), 0);
        Self {
            horizon_steps: p.horizon_steps,
            start_minute: p.start_minute,
            base_load_range: (50.0, 200.0),
            power_factor: p.power_factor,
            sinusoid_amplitude_range: p.sinusoid_amplitude_range,
            sinusoid_period_range: p.sinusoid_period_range,
            noise_scale: p.noise_scale,
            noise_correlation: p.noise_correlation,
            spatial_smoothing: p.spatial_smoothing,
            s_base_kw: p.s_base_kw,
        }
    }
}

impl ProfileSection {
    pub fn spec(&self, nodes: usize, seed: u64) -> ProfileSpec {
        let mut p = ProfileSpec::random_mix(nodes, self.horizon_steps, self.base_load_range, seed);
        p.start_minute = self.start_minute;
        p.power_factor = self.power_factor;
        p.sinusoid_amplitude_range = self.sinusoid_amplitude_range;
        p.sinusoid_period_range = self.sinusoid_period_range;
        p.noise_scale = self.noise_scale;
        p.noise_correlation = self.noise_correlation;
        p.spatial_smoothing = self.spatial_smoothing;
        p.s_base_kw = self.s_base_kw;
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub tasks: Vec<TaskSchedule>,
    pub missing: Vec<f64>,
    pub fad: f64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            tasks: vec![
                TaskSchedule { quantity: Quantity::P, period: 15, offset: 0, metered: true },
                TaskSchedule { quantity: Quantity::VMag, period: 1, offset: 0, metered: false },
            ],
            missing: vec![0.0, 0.1, 0.2],
            fad: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub families: Vec<NoiseFamily>,
    pub relative_std: Vec<f64>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { families: vec![NoiseFamily::Gaussian], relative_std: vec![0.01] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub methods: Vec<Method>,
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub rho: f64,
    pub alpha: f64,
    pub basis_max: usize,
    pub schedule: Schedule,
    pub mode: NoiseMode,
    pub standardize: bool,
    /// Select hyperparameters per run by cross-validation over `[tune]`.
    pub tune: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            methods: vec![Method::RgpG, Method::Rgp, Method::Linear],
            lengthscale: m.hp.lengthscale,
            signal_variance: m.hp.signal_variance,
            noise_variance: m.hp.noise_variance,
            rho: m.rho,
            alpha: m.alpha,
            basis_max: m.basis_max,
            schedule: m.schedule,
            mode: m.noise_mode,
            standardize: m.standardize,
            tune: false,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            hp: Hyperparameters::new(self.lengthscale, self.signal_variance, self.noise_variance)?,
            rho: self.rho,
            alpha: self.alpha,
            basis_max: self.basis_max,
            schedule: self.schedule,
            noise_mode: self.mode,
            standardize: self.standardize,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsseSection {
    pub fad: Vec<f64>,
    pub inputs: Vec<Method>,
    /// Estimate every `eval_every` fine steps, starting at `eval_offset`.
    pub eval_every: usize,
    pub eval_offset: usize,
    /// `ε` relative to `‖P_Ω(Z)‖²`.
    pub epsilon_rel: f64,
    pub lambda_pf: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for DsseSection {
    fn default() -> Self {
        let o = DsseOptions::default();
        Self {
            fad: vec![0.5, 0.7, 0.9],
            inputs: vec![Method::RgpG, Method::Linear],
            eval_every: 15,
            eval_offset: 3,
            epsilon_rel: 1e-8,
            lambda_pf: 1.0,
            max_iter: o.max_iter,
            tol: o.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub repeats: usize,
    pub feeder: FeederSection,
    pub profile: ProfileSection,
    pub sampling: SamplingSection,
    pub noise: NoiseSection,
    pub model: ModelSection,
    pub tune: GridSpec,
    pub dsse: Option<DsseSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            repeats: 1,
            feeder: FeederSection::default(),
            profile: ProfileSection::default(),
            sampling: SamplingSection::default(),
            noise: NoiseSection::default(),
            model: ModelSection::default(),
            tune: GridSpec::default(),
            dsse: None,
        }
    }
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|k| self.seed.wrapping_add(k)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::InvalidParameter("repeats must be >= 1".into()));
        }
        if self.sampling.tasks.is_empty() || self.sampling.missing.is_empty() {
            return Err(Error::InvalidParameter("sampling needs tasks and missing levels".into()));
        }
        if self.noise.families.is_empty() || self.noise.relative_std.is_empty() {
            return Err(Error::InvalidParameter("noise needs families and std levels".into()));
        }
        if self.model.methods.is_empty() {
            return Err(Error::InvalidParameter("at least one method is required".into()));
        }
        if self.profile.horizon_steps < 2 || self.feeder.phases == 0 {
            return Err(Error::InvalidParameter("horizon >= 2 and phases >= 1 are required".into()));
        }
        self.model.model_config()?;
        if self.model.tune {
            self.tune.validate()?;
        }
        if let Some(d) = &self.dsse {
            if d.eval_every == 0 || d.fad.is_empty() || d.inputs.is_empty() {
                return Err(Error::InvalidParameter("dsse needs eval_every >= 1, fad levels and inputs".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Orientation of each task in the task-correlation matrix.
    pub fn task_signs(&self) -> Vec<f64> {
        self.sampling.tasks.iter().map(|t| quantity_sign(t.quantity)).collect()
    }
}

/// Voltage magnitude falls as load rises.
pub fn quantity_sign(q: Quantity) -> f64 {
    match q {
        Quantity::VMag => -1.0,
        _ => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapeRow {
    pub seed: u64,
    pub missing: f64,
    pub family: NoiseFamily,
    pub relative_std: f64,
    pub method: Method,
    pub task: String,
    pub mape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapeSummary {
    pub missing: f64,
    pub family: NoiseFamily,
    pub relative_std: f64,
    pub method: Method,
    pub task: String,
    pub mean_mape: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsseRow {
    pub seed: u64,
    pub fad: f64,
    pub input: Method,
    pub quantity: String,
    pub mean_abs_error: f64,
    pub unconverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsseSummary {
    pub fad: f64,
    pub input: Method,
    pub quantity: String,
    pub mean_abs_error: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedRow {
    pub seed: u64,
    pub method: Method,
    pub candidate: hyper::Candidate,
    pub cv_mape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub config_digest: String,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub imputation: Vec<MapeRow>,
    pub summary: Vec<MapeSummary>,
    pub tuned: Vec<TunedRow>,
    pub dsse: Vec<DsseRow>,
    pub dsse_summary: Vec<DsseSummary>,
}

/// Feeder, PF model, sensing graph and truth for one run seed.
pub struct Scenario {
    pub feeder: dsse::RadialFeeder,
    pub pf: dsse::LinearPFModel,
    pub graph: crate::graph::FeederGraph,
    pub truth: Truth,
}

pub fn scenario(cfg: &ExperimentConfig, seed: u64) -> Result<Scenario> {
    let f = &cfg.feeder;
    let feeder = simlab::random_radial_feeder(f.phases, f.r_range, f.x_over_r, f.v_ref, f.seed.unwrap_or(seed))?;
    let pf = dsse::build_toy_pf_model(&feeder)?;
    let graph = simlab::sensing_graph(&feeder)?;
    let truth = simlab::generate_truth(&cfg.profile.spec(f.phases, seed), &feeder, &pf)?;
    Ok(Scenario { feeder, pf, graph, truth })
}

pub fn schedule_for(cfg: &ExperimentConfig, seed: u64, missing: f64, fad: f64) -> SamplingSchedule {
    SamplingSchedule { tasks: cfg.sampling.tasks.clone(), missing_fraction: missing, fad, meter_seed: seed, mask_seed: seed }
}

fn fine_grid(horizon: usize) -> (Vec<f64>, Vec<usize>) {
    ((0..horizon).map(|t| t as f64).collect(), (0..horizon).collect())
}

/// Model configuration for one run, tuned by cross-validation when requested.
fn run_model(
    cfg: &ExperimentConfig,
    data: &crate::data::BatchDataset,
    sc: &Scenario,
    method: Method,
    seed: u64,
    tuned: &mut Vec<TunedRow>,
) -> Result<ModelConfig> {
    let base = cfg.model.model_config()?;
    if !cfg.model.tune || method == Method::Linear {
        return Ok(base);
    }
    let graph = (method == Method::RgpG).then_some(&sc.graph);
    let report = hyper::cross_validate(data, &cfg.tune, method, graph, &base, &cfg.task_signs(), seed)?;
    tuned.push(TunedRow { seed, method, candidate: report.best, cv_mape: report.best_mape });
    Ok(ModelConfig { hp: report.best.hyperparameters()?, rho: report.best.rho, ..base })
}

struct SeedOutput {
    rows: Vec<MapeRow>,
    tuned: Vec<TunedRow>,
    dsse: Vec<DsseRow>,
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    let signs = cfg.task_signs();
    let mut out = SeedOutput { rows: Vec::new(), tuned: Vec::new(), dsse: Vec::new() };
    let sc = scenario(cfg, seed)?;
    let (grid, steps) = fine_grid(sc.truth.horizon());
    for &family in &cfg.noise.families {
        for &std in &cfg.noise.relative_std {
            for &missing in &cfg.sampling.missing {
                let schedule = schedule_for(cfg, seed, missing, cfg.sampling.fad);
                let noise = NoiseSpec { family, relative_std: std, seed };
                let data = simlab::sample(&sc.truth, &schedule, &noise)?;
                for &method in &cfg.model.methods {
                    let model = run_model(cfg, &data, &sc, method, seed, &mut out.tuned)?;
                    let imputed = impute::impute(&data, Some(&sc.graph), &grid, method, &model, &signs)?;
                    for (k, t) in cfg.sampling.tasks.iter().enumerate() {
                        out.rows.push(MapeRow {
                            seed,
                            missing,
                            family,
                            relative_std: std,
                            method,
                            task: t.quantity.name().to_string(),
                            mape: simlab::task_mape(&imputed.result, &sc.truth, k, t.quantity, &steps)?,
                        });
                    }
                }
            }
        }
    }
    if let Some(d) = &cfg.dsse {
        out.dsse = run_dsse(cfg, d, &sc, seed, &grid)?;
    }
    Ok(out)
}

/// Seeds run in parallel; results are merged in seed order, so output does not depend on scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let per_seed = cfg.seeds().into_par_iter().map(|seed| run_seed(cfg, seed)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut tuned = Vec::new();
    let mut dsse_rows = Vec::new();
    for s in per_seed {
        rows.extend(s.rows);
        tuned.extend(s.tuned);
        dsse_rows.extend(s.dsse);
    }
    Ok(ExperimentReport {
        schema_version: SCHEMA_VERSION,
        config_digest: cfg.digest(),
        seed: cfg.seed,
        seeds: cfg.seeds(),
        summary: summarize(&rows),
        imputation: rows,
        tuned,
        dsse_summary: summarize_dsse(&dsse_rows),
        dsse: dsse_rows,
    })
}

/// Per-step DSSE solutions for one FAD level and input method.
pub struct DsseRun {
    pub fad: f64,
    pub input: Method,
    pub metered: Vec<usize>,
    pub steps: Vec<(usize, DsseSolution)>,
}

/// DSSE on one scenario at each FAD level and input method.
pub fn dsse_runs(cfg: &ExperimentConfig, d: &DsseSection, sc: &Scenario, seed: u64, grid: &[f64]) -> Result<Vec<DsseRun>> {
    let signs = cfg.task_signs();
    let m = sc.truth.nodes();
    let columns: Vec<(usize, Quantity)> = cfg.sampling.tasks.iter().enumerate().map(|(k, t)| (k, t.quantity)).collect();
    let family = cfg.noise.families[0];
    let std = cfg.noise.relative_std[0];
    let options = DsseOptions { max_iter: d.max_iter, tol: d.tol, ..Default::default() };
    let eval: Vec<usize> = (d.eval_offset..sc.truth.horizon()).step_by(d.eval_every).collect();
    let mut out = Vec::new();
    for &fad in &d.fad {
        let schedule = schedule_for(cfg, seed, cfg.sampling.missing[0], fad);
        let meters = schedule.meter_set(m);
        let data = simlab::sample(&sc.truth, &schedule, &NoiseSpec { family, relative_std: std, seed })?;
        let mut mask = DMatrix::from_element(m, COLUMNS, false);
        for t in &cfg.sampling.tasks {
            for i in 0..m {
                if !t.metered || meters.contains(&i) {
                    mask[(i, t.quantity.column())] = true;
                }
            }
        }
        for &input in &d.inputs {
            let mut tuned = Vec::new();
            let model = run_model(cfg, &data, sc, input, seed, &mut tuned)?;
            let imputed = impute::impute(&data, Some(&sc.graph), grid, input, &model, &signs)?;
            let mut steps = Vec::with_capacity(eval.len());
            for &t in &eval {
                let values = dsse::snapshot_values(&imputed.result, t, &columns);
                let mut problem = dsse::assemble_problem(&values, &sc.pf, &mask, 0.0, d.lambda_pf)?;
                problem.epsilon = d.epsilon_rel * problem.project(&problem.z).norm_squared();
                steps.push((t, dsse::solve(&problem, &options)?));
            }
            out.push(DsseRun { fad, input, metered: meters.clone(), steps });
        }
    }
    Ok(out)
}

pub fn run_dsse(cfg: &ExperimentConfig, d: &DsseSection, sc: &Scenario, seed: u64, grid: &[f64]) -> Result<Vec<DsseRow>> {
    let mut out = Vec::new();
    for run in dsse_runs(cfg, d, sc, seed, grid)? {
        let mut sums = [0.0; COLUMNS];
        for (t, sol) in &run.steps {
            let errs = sol.column_errors(&sc.truth.state_matrix(*t));
            sums.iter_mut().zip(errs).for_each(|(s, e)| *s += e);
        }
        let unconverged = run.steps.iter().filter(|(_, s)| !s.converged).count();
        for q in Quantity::ALL {
            out.push(DsseRow {
                seed,
                fad: run.fad,
                input: run.input,
                quantity: q.name().to_string(),
                mean_abs_error: sums[q.column()] / run.steps.len().max(1) as f64,
                unconverged,
            });
        }
    }
    Ok(out)
}

fn key_f(v: f64) -> u64 {
    v.to_bits()
}

pub fn summarize(rows: &[MapeRow]) -> Vec<MapeSummary> {
    let mut groups: BTreeMap<(u64, u8, u64, Method, String), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let fam = r.family as u8;
        let e = groups.entry((key_f(r.missing), fam, key_f(r.relative_std), r.method, r.task.clone())).or_default();
        e.0 += r.mape;
        e.1 += 1;
    }
    let mut out: Vec<MapeSummary> = groups
        .into_iter()
        .map(|((mi, fam, sd, method, task), (sum, n))| MapeSummary {
            missing: f64::from_bits(mi),
            family: if fam == 0 { NoiseFamily::Gaussian } else { NoiseFamily::Laplacian },
            relative_std: f64::from_bits(sd),
            method,
            task,
            mean_mape: sum / n as f64,
            runs: n,
        })
        .collect();
    out.sort_by(|a, b| {
        (a.family as u8, a.relative_std, a.missing, a.method, &a.task)
            .partial_cmp(&(b.family as u8, b.relative_std, b.missing, b.method, &b.task))
            .expect("finite keys")
    });
    out
}

pub fn summarize_dsse(rows: &[DsseRow]) -> Vec<DsseSummary> {
    let mut groups: BTreeMap<(u64, Method, String), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = groups.entry((key_f(r.fad), r.input, r.quantity.clone())).or_default();
        e.0 += r.mean_abs_error;
        e.1 += 1;
    }
    let mut out: Vec<DsseSummary> = groups
        .into_iter()
        .map(|((fad, input, quantity), (sum, n))| DsseSummary {
            fad: f64::from_bits(fad),
            input,
            quantity,
            mean_abs_error: sum / n as f64,
            runs: n,
        })
        .collect();
    out.sort_by(|a, b| (a.fad, a.input).partial_cmp(&(b.fad, b.input)).expect("finite keys"));
    out
}

impl ExperimentReport {
    pub fn summary_for(&self, missing: f64, family: NoiseFamily, std: f64, method: Method, task: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.missing == missing && s.family == family && s.relative_std == std && s.method == method && s.task == task)
            .map(|s| s.mean_mape)
    }

    pub fn run_mape(&self, seed: u64, missing: f64, family: NoiseFamily, std: f64, method: Method, task: &str) -> Option<f64> {
        self.imputation
            .iter()
            .find(|r| {
                r.seed == seed
                    && r.missing == missing
                    && r.family == family
                    && r.relative_std == std
                    && r.method == method
                    && r.task == task
            })
            .map(|r| r.mape)
    }

    /// Writes `report.json` and `tables/*.csv`; every file carries the digest and seed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let tables = dir.join("tables");
        std::fs::create_dir_all(&tables)?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("report.json"), json + "\n")?;
        let stamp = format!("# config_digest={} seed={} schema_version={}\n", self.config_digest, self.seed, self.schema_version);

        let mut w = csv_writer(&stamp);
        w.write_record(["noise", "relative_std", "missing", "method", "task", "mean_mape", "runs"])?;
        for s in &self.summary {
            w.write_record([
                family_name(s.family).to_string(),
                s.relative_std.to_string(),
                s.missing.to_string(),
                s.method.name().to_string(),
                s.task.clone(),
                s.mean_mape.to_string(),
                s.runs.to_string(),
            ])?;
        }
        finish_csv(w, &tables.join("mape_summary.csv"))?;

        let mut w = csv_writer(&stamp);
        w.write_record(["seed", "noise", "relative_std", "missing", "method", "task", "mape"])?;
        for r in &self.imputation {
            w.write_record([
                r.seed.to_string(),
                family_name(r.family).to_string(),
                r.relative_std.to_string(),
                r.missing.to_string(),
                r.method.name().to_string(),
                r.task.clone(),
                r.mape.to_string(),
            ])?;
        }
        finish_csv(w, &tables.join("mape_runs.csv"))?;

        if !self.dsse.is_empty() {
            let mut w = csv_writer(&stamp);
            w.write_record(["fad", "input", "quantity", "mean_abs_error", "runs"])?;
            for s in &self.dsse_summary {
                w.write_record([
                    s.fad.to_string(),
                    s.input.name().to_string(),
                    s.quantity.clone(),
                    s.mean_abs_error.to_string(),
                    s.runs.to_string(),
                ])?;
            }
            finish_csv(w, &tables.join("dsse_summary.csv"))?;
            let mut w = csv_writer(&stamp);
            w.write_record(["seed", "fad", "input", "quantity", "mean_abs_error", "unconverged"])?;
            for r in &self.dsse {
                w.write_record([
                    r.seed.to_string(),
                    r.fad.to_string(),
                    r.input.name().to_string(),
                    r.quantity.clone(),
                    r.mean_abs_error.to_string(),
                    r.unconverged.to_string(),
                ])?;
            }
            finish_csv(w, &tables.join("dsse_runs.csv"))?;
        }
        Ok(())
    }
}

pub fn family_name(f: NoiseFamily) -> &'static str {
    match f {
        NoiseFamily::Gaussian => "gaussian",
        NoiseFamily::Laplacian => "laplacian",
    }
}

fn csv_writer(stamp: &str) -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(stamp.as_bytes().to_vec())
}

fn finish_csv(w: csv::Writer<Vec<u8>>, path: &Path) -> Result<()> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    std::fs::write(path, bytes)?;
    Ok(())
}
