//! Subcommand bodies. Every file written carries the config digest and seed.

use std::collections::BTreeMap;
use std::path::Path;

use gridgp_core::data::BatchDataset;
use gridgp_core::dsse::{self, LinearPFModel, PfModelFile, Quantity};
use gridgp_core::experiment::{self, Scenario};
use gridgp_core::graph::{FeederGraph, GraphOptions};
use gridgp_core::gp_recursive::TraceEntry;
use gridgp_core::hyper::{self, CvReport};
use gridgp_core::impute::{self, Method};
use gridgp_core::simlab::{self, NoiseSpec};
use serde::{Deserialize, Serialize};

use crate::{CliError, Run};

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn csv_bytes(stamp: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(stamp.as_bytes().to_vec());
    let io = |e: csv::Error| CliError::Config(format!("csv: {e}"));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.into_inner().map_err(|e| CliError::Config(format!("csv: {}", e.error())))
}

/// Measurements, optional graph and task orientation for `impute` and `tune`.
struct Inputs {
    data: BatchDataset,
    graph: Option<FeederGraph>,
    signs: Vec<f64>,
    /// Present when the data were synthesized, for scoring against truth.
    scenario: Option<Scenario>,
}

fn load_graph(path: &Path) -> Result<FeederGraph, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
    Ok(FeederGraph::from_edge_csv(f, GraphOptions::default())?)
}

fn inputs(run: &Run) -> Result<Inputs, CliError> {
    let cfg = &run.cfg;
    let file_graph = cfg.input.graph.as_deref().map(load_graph).transpose()?;
    let (data, graph, signs, scenario) = match &cfg.input.measurements {
        Some(path) => {
            let f = std::fs::File::open(path)
                .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
            let data = BatchDataset::read_csv(f, None)?;
            let signs = vec![1.0; data.tasks];
            (data, file_graph, signs, None)
        }
        None => {
            let ex = &cfg.experiment;
            let sc = experiment::scenario(ex, cfg.seed)?;
            let schedule = experiment::schedule_for(ex, cfg.seed, ex.sampling.missing[0], ex.sampling.fad);
            let noise = NoiseSpec { family: ex.noise.families[0], relative_std: ex.noise.relative_std[0], seed: cfg.seed };
            let data = simlab::sample(&sc.truth, &schedule, &noise)?;
            let graph = file_graph.unwrap_or_else(|| sc.graph.clone());
            (data, Some(graph), ex.task_signs(), Some(sc))
        }
    };
    let signs = match &cfg.input.task_signs {
        Some(s) if s.len() != data.tasks => {
            return Err(CliError::Config(format!("{} task signs for {} tasks", s.len(), data.tasks)))
        }
        Some(s) => s.clone(),
        None => signs,
    };
    if let Some(g) = &graph {
        if g.node_count() != data.nodes {
            return Err(CliError::Config(format!("graph has {} nodes, measurements {}", g.node_count(), data.nodes)));
        }
    }
    Ok(Inputs { data, graph, signs, scenario })
}

fn fine_grid(data: &BatchDataset) -> Result<Vec<f64>, CliError> {
    let (Some(first), Some(last)) = (data.batches.first(), data.batches.last()) else {
        return Err(CliError::Config("measurement file has no rows".into()));
    };
    let (a, b) = (first.time.ceil() as i64, last.time.floor() as i64);
    Ok((a..=b).map(|t| t as f64).collect())
}

#[derive(Serialize)]
struct TheoremVerdict {
    name: &'static str,
    passed: bool,
    detail: String,
}

#[derive(Serialize)]
struct ImputeSummary<'a> {
    schema_version: u32,
    config_digest: &'a str,
    seed: u64,
    method: Method,
    tasks: usize,
    nodes: usize,
    grid_start: f64,
    grid_end: f64,
    observed: usize,
    /// Per-task MAPE (%) against the synthetic truth; empty for external data.
    truth_mape: BTreeMap<String, f64>,
    theorem_checks: Vec<TheoremVerdict>,
}

/// Compares the no-graph and graph-filtered runs on the same data.
fn theorem_checks(inp: &Inputs, grid: &[f64], run: &Run) -> Result<Vec<TheoremVerdict>, CliError> {
    let graph = inp
        .graph
        .as_ref()
        .ok_or_else(|| CliError::Config("--verify-theorems needs a graph".into()))?;
    let model = run.cfg.model_config()?;
    let plain = impute::impute(&inp.data, None, grid, Method::Rgp, &model, &inp.signs)?;
    let filtered = impute::impute(&inp.data, Some(graph), grid, Method::RgpG, &model, &inp.signs)?;
    let (p0, g0) = (plain.trace_log[0].trace, filtered.trace_log[0].trace);
    let mut out = vec![TheoremVerdict {
        name: "theorem1",
        passed: p0 > g0,
        detail: format!("prior trace {p0:e} without graph, {g0:e} with graph"),
    }];
    let mut bad = Vec::new();
    for (k, (a, b)) in plain.trace_log.iter().zip(&filtered.trace_log).enumerate().skip(1) {
        let observed = inp.data.batches[k - 1].observed_count() > 0;
        let ok = if observed { a.trace > b.trace } else { a.trace >= b.trace };
        if !ok {
            bad.push(format!("step {k}: {:e} vs {:e}", a.trace, b.trace));
        }
    }
    out.push(TheoremVerdict {
        name: "theorem2",
        passed: bad.is_empty(),
        detail: if bad.is_empty() { format!("{} steps ordered", plain.trace_log.len() - 1) } else { bad.join("; ") },
    });
    Ok(out)
}

fn trace_rows(log: &[TraceEntry]) -> Vec<Vec<String>> {
    log.iter()
        .map(|e| vec![e.step.to_string(), if e.time.is_finite() { e.time.to_string() } else { String::new() }, e.trace.to_string()])
        .collect()
}

pub fn impute(run: &Run) -> Result<(), CliError> {
    let cfg = &run.cfg;
    let method = cfg.model.method;
    if run.trace_log && !matches!(method, Method::Rgp | Method::RgpG) {
        return Err(CliError::Config("--trace-log needs --method rgp or rgp-g".into()));
    }
    let inp = inputs(run)?;
    let grid = fine_grid(&inp.data)?;
    let model = cfg.model_config()?;
    let out = impute::impute(&inp.data, inp.graph.as_ref(), &grid, method, &model, &inp.signs)?;
    let stamp = run.stamp();

    let mut buf = Vec::new();
    out.result.write_csv(&mut buf, &stamp)?;
    write_file(&run.out.join("imputed.csv"), &buf)?;
    if inp.scenario.is_some() {
        let mut buf = Vec::new();
        inp.data.write_csv(&mut buf, &stamp)?;
        write_file(&run.out.join("measurements.csv"), &buf)?;
        if let Some(g) = &inp.graph {
            let rows: Vec<_> = g.edges().into_iter().map(|(a, b)| vec![a.to_string(), b.to_string()]).collect();
            write_file(&run.out.join("graph.csv"), &csv_bytes(&stamp, &["from", "to"], rows)?)?;
        }
    }
    if run.trace_log {
        let bytes = csv_bytes(&stamp, &["step", "time", "trace_cov_f"], trace_rows(&out.trace_log))?;
        write_file(&run.out.join("trace_log.csv"), &bytes)?;
    }

    let mut truth_mape = BTreeMap::new();
    if let Some(sc) = &inp.scenario {
        let steps: Vec<usize> = grid.iter().map(|&t| t as usize).collect();
        for (k, t) in cfg.experiment.sampling.tasks.iter().enumerate() {
            let m = simlab::task_mape(&out.result, &sc.truth, k, t.quantity, &steps)?;
            truth_mape.insert(t.quantity.name().to_string(), m);
        }
    }
    let checks = if run.verify_theorems { theorem_checks(&inp, &grid, run)? } else { Vec::new() };
    let summary = ImputeSummary {
        schema_version: cfg.schema_version,
        config_digest: &run.digest,
        seed: cfg.seed,
        method,
        tasks: inp.data.tasks,
        nodes: inp.data.nodes,
        grid_start: grid[0],
        grid_end: grid[grid.len() - 1],
        observed: inp.data.observed_count(),
        truth_mape,
        theorem_checks: checks,
    };
    write_json(&run.out.join("run.json"), &summary)?;
    let failed: Vec<&str> = summary.theorem_checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if !failed.is_empty() {
        return Err(CliError::Verification(failed.join(", ")));
    }
    Ok(())
}

#[derive(Serialize)]
struct CvDocument<'a> {
    schema_version: u32,
    config_digest: &'a str,
    seed: u64,
    report: &'a CvReport,
}

pub fn tune(run: &Run) -> Result<(), CliError> {
    let cfg = &run.cfg;
    let method = cfg.model.method;
    if method == Method::Linear {
        return Err(CliError::Config("linear interpolation has no hyperparameters to tune".into()));
    }
    let inp = inputs(run)?;
    let graph = if method == Method::RgpG { inp.graph.as_ref() } else { None };
    let base = cfg.model_config()?;
    let report = hyper::cross_validate(&inp.data, &cfg.tune, method, graph, &base, &inp.signs, cfg.seed)?;
    let doc = CvDocument { schema_version: cfg.schema_version, config_digest: &run.digest, seed: cfg.seed, report: &report };
    write_json(&run.out.join("cv_report.json"), &doc)?;
    let table = format!("{}{}", run.stamp(), report.render_table());
    write_file(&run.out.join("cv_table.txt"), table.as_bytes())
}

/// PF model JSON as written by `dsse`; a bare model object is accepted on input too.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PfDocument {
    schema_version: u32,
    config_digest: String,
    seed: u64,
    model: PfModelFile,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PfInput {
    Document(PfDocument),
    Bare(PfModelFile),
}

fn load_pf(path: &Path) -> Result<LinearPFModel, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let file = match serde_json::from_str::<PfInput>(&text)
        .map_err(|e| CliError::Config(format!("{}: not a PF model file: {e}", path.display())))?
    {
        PfInput::Document(d) => d.model,
        PfInput::Bare(m) => m,
    };
    Ok(LinearPFModel::from_file(&file)?)
}

#[derive(Serialize)]
struct DsseLevel {
    fad: f64,
    input: Method,
    metered: Vec<usize>,
    steps: usize,
    unconverged: usize,
    mean_abs_error: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct DsseDocument<'a> {
    schema_version: u32,
    config_digest: &'a str,
    seed: u64,
    lambda_pf: f64,
    epsilon_rel: f64,
    levels: Vec<DsseLevel>,
}

pub fn dsse(run: &Run) -> Result<(), CliError> {
    let cfg = &run.cfg;
    let ex = &cfg.experiment;
    let d = &cfg.dsse;
    if d.eval_every == 0 || d.fad.is_empty() || d.inputs.is_empty() {
        return Err(CliError::Config("[dsse] needs eval_every >= 1, fad levels and inputs".into()));
    }
    let mut sc = experiment::scenario(ex, cfg.seed)?;
    if let Some(path) = &cfg.input.pf_model {
        let pf = load_pf(path)?;
        if pf.phases() != sc.pf.phases() {
            return Err(CliError::Config(format!(
                "PF model has {} phases, [experiment.feeder] {}",
                pf.phases(),
                sc.pf.phases()
            )));
        }
        sc.truth = simlab::generate_truth(&ex.profile.spec(ex.feeder.phases, cfg.seed), &sc.feeder, &pf)?;
        sc.pf = pf;
    }
    let stamp = run.stamp();
    let doc = PfDocument {
        schema_version: cfg.schema_version,
        config_digest: run.digest.clone(),
        seed: cfg.seed,
        model: sc.pf.to_file(),
    };
    write_json(&run.out.join("pf_model.json"), &doc)?;

    let grid: Vec<f64> = (0..sc.truth.horizon()).map(|t| t as f64).collect();
    let runs = experiment::dsse_runs(ex, d, &sc, cfg.seed, &grid)?;
    let mut levels = Vec::new();
    for r in &runs {
        let dir = run.out.join("dsse").join(format!("fad_{}", r.fad)).join(r.input.name());
        let mut sums = [0.0; dsse::COLUMNS];
        for (t, sol) in &r.steps {
            let truth = sc.truth.state_matrix(*t);
            let mut rows = Vec::new();
            for phase in 0..truth.nrows() {
                for q in Quantity::ALL {
                    let (tv, ev) = (truth[(phase, q.column())], sol.x_hat[(phase, q.column())]);
                    rows.push(vec![phase.to_string(), q.name().to_string(), tv.to_string(), ev.to_string(), (ev - tv).abs().to_string()]);
                }
            }
            let bytes = csv_bytes(&stamp, &["phase", "quantity", "true", "estimated", "abs_error"], rows)?;
            write_file(&dir.join(format!("t{t:05}.csv")), &bytes)?;
            sums.iter_mut().zip(sol.column_errors(&truth)).for_each(|(s, e)| *s += e);
        }
        let n = r.steps.len().max(1) as f64;
        levels.push(DsseLevel {
            fad: r.fad,
            input: r.input,
            metered: r.metered.clone(),
            steps: r.steps.len(),
            unconverged: r.steps.iter().filter(|(_, s)| !s.converged).count(),
            mean_abs_error: Quantity::ALL.iter().map(|q| (q.name().to_string(), sums[q.column()] / n)).collect(),
        });
    }
    let summary = DsseDocument {
        schema_version: cfg.schema_version,
        config_digest: &run.digest,
        seed: cfg.seed,
        lambda_pf: d.lambda_pf,
        epsilon_rel: d.epsilon_rel,
        levels,
    };
    write_json(&run.out.join("dsse_summary.json"), &summary)
}

pub fn experiment(run: &Run) -> Result<(), CliError> {
    let report = experiment::run_experiment(&run.cfg.experiment)?;
    report.write(&run.out)?;
    Ok(())
}
