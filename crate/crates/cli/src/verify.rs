//! Property battery behind `gridgp verify`. Checks never panic; every failure is a verdict.

use std::panic::{catch_unwind, AssertUnwindSafe};

use gridgp_core::data::{BatchDataset, MeasurementBatch};
use gridgp_core::gp_batch::{self, BatchOptions};
use gridgp_core::gp_recursive::{
    self, BasisConfig, CovarianceOutput, RecursiveMode, Schedule, SessionOptions, SessionSpec,
};
use gridgp_core::graph::{self, FeederGraph};
use gridgp_core::kernel::{Hyperparameters, NoiseMode, TaskKernel};
use gridgp_core::simlab::{self, stream_rng};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::commands::write_json;
use crate::{CliError, Run};

pub const CHECKS: [&str; 6] = ["laplacian", "theorem1", "theorem2", "stability", "oracle", "causality"];

#[derive(Debug, Serialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub violations: usize,
    /// First few violations.
    pub detail: Vec<String>,
}

#[derive(Debug, Serialize)]
struct VerifyDocument<'a> {
    schema_version: u32,
    config_digest: &'a str,
    seed: u64,
    passed: bool,
    checks: Vec<Verdict>,
}

/// Collects per-case outcomes for one check.
struct Tally {
    cases: usize,
    detail: Vec<String>,
    violations: usize,
}

impl Tally {
    fn new() -> Self {
        Self { cases: 0, detail: Vec::new(), violations: 0 }
    }

    fn case(&mut self, outcome: Result<(), String>) {
        self.cases += 1;
        if let Err(msg) = outcome {
            self.violations += 1;
            if self.detail.len() < 5 {
                self.detail.push(msg);
            }
        }
    }

    fn verdict(self, name: &str) -> Verdict {
        Verdict {
            name: name.to_string(),
            passed: self.violations == 0 && self.cases > 0,
            cases: self.cases,
            violations: self.violations,
            detail: self.detail,
        }
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_graph(rng: &mut ChaCha8Rng, m_range: (usize, usize), mesh: bool) -> Result<FeederGraph, String> {
    let m = rng.random_range(m_range.0..=m_range.1);
    let extra = if mesh { rng.random_range(1..=m) } else { 0 };
    simlab::random_graph(m, extra, rng.random()).map_err(err)
}

fn random_hp(rng: &mut ChaCha8Rng) -> Hyperparameters {
    Hyperparameters {
        lengthscale: rng.random_range(1.0..6.0),
        signal_variance: rng.random_range(0.5..2.0),
        noise_variance: rng.random_range(0.01..0.2),
    }
}

fn random_task(rng: &mut ChaCha8Rng, d: usize) -> Result<TaskKernel, String> {
    let signs: Vec<f64> = (0..d).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
    TaskKernel::equicorrelated(&signs, rng.random_range(0.0..0.8)).map_err(err)
}

/// Random data on integer times; each batch may be fully missing.
fn random_data(rng: &mut ChaCha8Rng, d: usize, m: usize, t: usize, missing: f64, empty_batch: f64) -> BatchDataset {
    let batches = (0..t)
        .map(|k| {
            let mut b = MeasurementBatch::empty(k as f64, d * m);
            if !rng.random_bool(empty_batch) {
                for s in 0..d * m {
                    if !rng.random_bool(missing) {
                        b.set(s, (k as f64 / 3.0 + s as f64).sin() + rng.random_range(-0.1..0.1));
                    }
                }
            }
            b
        })
        .collect();
    BatchDataset::new(d, m, batches).expect("well-formed random data")
}

fn laplacian(seed: u64, break_symmetry: bool) -> Verdict {
    let mut rng = stream_rng(seed, "verify-laplacian");
    let mut t = Tally::new();
    for k in 0..100 {
        let outcome = (|| {
            let g = random_graph(&mut rng, (2, 20), k % 2 == 1)?;
            let mut a = g.adjacency().clone();
            if break_symmetry {
                a[(0, 1)] = 1.0 - a[(0, 1)];
            }
            let g = graph::build_laplacian(&a).map_err(|e| format!("case {k}: {e}"))?;
            let l = g.laplacian();
            let m = l.nrows();
            if (l - l.transpose()).abs().max() > 0.0 {
                return Err(format!("case {k}: Laplacian not symmetric"));
            }
            if l.row_iter().any(|r| r.sum().abs() > 1e-10) {
                return Err(format!("case {k}: nonzero row sum"));
            }
            if g.eigenvalues().min() < -1e-10 {
                return Err(format!("case {k}: negative eigenvalue {}", g.eigenvalues().min()));
            }
            let f = graph::make_filter(&g, 0.05).map_err(err)?;
            let ones = nalgebra::DVector::from_element(m, 1.0);
            if (f.matrix() * &ones - &ones).amax() > 1e-10 {
                return Err(format!("case {k}: filter rows do not sum to one"));
            }
            Ok(())
        })();
        t.case(outcome);
    }
    t.verdict("laplacian")
}

fn theorem1(seed: u64) -> Verdict {
    let mut rng = stream_rng(seed, "verify-theorem1");
    let mut t = Tally::new();
    for k in 0..100 {
        let outcome = (|| {
            let g = random_graph(&mut rng, (3, 20), k % 2 == 1)?;
            let d = rng.random_range(1..=2);
            let hp = random_hp(&mut rng);
            let task = random_task(&mut rng, d)?;
            let basis = BasisConfig::uniform(0.0, 10.0, rng.random_range(3..=10)).map_err(err)?;
            let filter = graph::make_filter(&g, 0.05).map_err(err)?;
            let state = gp_recursive::init_state(
                RecursiveMode::RgpG,
                &basis,
                &hp,
                &task,
                Some(&filter),
                g.node_count(),
                NoiseMode::Standard,
            )
            .map_err(err)?;
            let (plain, filtered) = gp_recursive::theorem1_traces(state.model());
            if plain > filtered {
                Ok(())
            } else {
                Err(format!("case {k}: {plain:e} <= {filtered:e}"))
            }
        })();
        t.case(outcome);
    }
    t.verdict("theorem1")
}

fn theorem2(seed: u64) -> Verdict {
    let mut rng = stream_rng(seed, "verify-theorem2");
    let mut t = Tally::new();
    for k in 0..20 {
        let outcome = (|| {
            let g = random_graph(&mut rng, (3, 8), k % 2 == 1)?;
            let (m, d) = (g.node_count(), rng.random_range(1..=2));
            let steps = rng.random_range(8..=15);
            let data = random_data(&mut rng, d, m, steps, 0.3, 0.2);
            let hp = random_hp(&mut rng);
            let task = random_task(&mut rng, d)?;
            let basis = BasisConfig::uniform(0.0, (steps - 1) as f64, 6).map_err(err)?;
            let filter = graph::make_filter(&g, 0.05).map_err(err)?;
            let mut plain =
                gp_recursive::init_state(RecursiveMode::Rgp, &basis, &hp, &task, None, m, NoiseMode::Standard)
                    .map_err(err)?;
            let mut filtered =
                gp_recursive::init_state(RecursiveMode::RgpG, &basis, &hp, &task, Some(&filter), m, NoiseMode::Standard)
                    .map_err(err)?;
            for (s, b) in data.batches.iter().enumerate() {
                let p = plain.infer(b.time);
                plain.update(&p, b).map_err(err)?;
                let p = filtered.infer(b.time);
                filtered.update(&p, b).map_err(err)?;
                let (a, c) = (plain.cov_f.trace(), filtered.cov_f.trace());
                let ok = if b.observed_count() > 0 { a > c } else { a >= c };
                if !ok {
                    return Err(format!("session {k} step {s}: {a:e} vs {c:e}"));
                }
            }
            Ok(())
        })();
        t.case(outcome);
    }
    t.verdict("theorem2")
}

fn stability(seed: u64) -> Verdict {
    let mut rng = stream_rng(seed, "verify-stability");
    let mut t = Tally::new();
    let alphas = [0.01, 0.05, 0.5];
    for k in 0..200 {
        let outcome = (|| {
            let g = random_graph(&mut rng, (4, 15), k % 2 == 1)?;
            let m = g.node_count();
            let mut a = g.adjacency().clone();
            let changes = 1 + k % 2;
            let absent: Vec<(usize, usize)> =
                (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).filter(|&(i, j)| a[(i, j)] == 0.0).collect();
            if absent.len() < changes {
                return Ok(());
            }
            for c in 0..changes {
                let (i, j) = absent[(rng.random_range(0..absent.len()) + c) % absent.len()];
                a[(i, j)] = 1.0;
                a[(j, i)] = 1.0;
            }
            let p = graph::build_laplacian(&a).map_err(err)?;
            let alpha = alphas[k % 3];
            let r = graph::stability_gap(&g, &p, alpha).map_err(err)?;
            if r.bound_satisfied {
                Ok(())
            } else {
                Err(format!("case {k}: {:e} > {alpha} * {:e}", r.filter_gap, r.laplacian_gap))
            }
        })();
        t.case(outcome);
    }
    t.verdict("stability")
}

fn rel_gap(a: &nalgebra::DVector<f64>, b: &nalgebra::DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

fn oracle(seed: u64) -> Verdict {
    let mut rng = stream_rng(seed, "verify-oracle");
    let mut t = Tally::new();
    for k in 0..50 {
        let outcome = (|| {
            let (d, m, steps) = (rng.random_range(1..=2), rng.random_range(1..=5), rng.random_range(3..=20));
            let data = random_data(&mut rng, d, m, steps, 0.0, 0.0);
            let hp = random_hp(&mut rng);
            let task = random_task(&mut rng, d)?;
            let grid = data.times();
            let basis = BasisConfig::explicit(grid.clone()).map_err(err)?;
            let spec = SessionSpec {
                mode: RecursiveMode::Rgp,
                basis: &basis,
                hp: &hp,
                task: &task,
                filter: None,
                options: SessionOptions::default(),
            };
            let rgp = gp_recursive::run_session(&spec, &data, Schedule::Interpolation, &grid).map_err(err)?.result;
            let full = gp_batch::fit_predict_full(&data, &grid, &hp, &task, BatchOptions::default()).map_err(err)?;
            let (dm, dv) = (rel_gap(&rgp.mean, &full.mean), rel_gap(&rgp.variance, &full.variance));
            if dm <= 1e-6 && dv <= 1e-5 {
                Ok(())
            } else {
                Err(format!("instance {k}: mean gap {dm:e}, variance gap {dv:e}"))
            }
        })();
        t.case(outcome);
    }
    t.verdict("oracle")
}

fn causality(seed: u64) -> Verdict {
    let mut rng = stream_rng(seed, "verify-causality");
    let mut t = Tally::new();
    for k in 0..20 {
        let outcome = (|| {
            let (d, m) = (rng.random_range(1..=2), rng.random_range(1..=4));
            let data = random_data(&mut rng, d, m, 20, 0.2, 0.1);
            let hp = random_hp(&mut rng);
            let task = random_task(&mut rng, d)?;
            let grid: Vec<f64> = (0..40).map(|g| g as f64 * 0.5 + 0.25).collect();
            let basis = BasisConfig::uniform(0.0, 20.0, 8).map_err(err)?;
            let spec = SessionSpec {
                mode: RecursiveMode::Rgp,
                basis: &basis,
                hp: &hp,
                task: &task,
                filter: None,
                options: SessionOptions::default(),
            };
            let out = gp_recursive::run_session(&spec, &data, Schedule::Prediction, &grid).map_err(err)?;
            for &(g, last) in &out.emissions {
                if last.is_some_and(|l| l >= g) {
                    return Err(format!("session {k}: emission at {g} read batch {last:?}"));
                }
            }
            for (q, &g) in grid.iter().enumerate() {
                let mut state = spec.init(m).map_err(err)?;
                for b in data.batches.iter().filter(|b| b.time < g) {
                    let p = state.infer(b.time);
                    state.update(&p, b).map_err(err)?;
                }
                let fresh = state.predict_ahead(&[g], CovarianceOutput::Marginal).map_err(err)?;
                for task in 0..d {
                    for node in 0..m {
                        let (a, b) = (out.result.mean_at(task, node, q), fresh.mean_at(task, node, 0));
                        if (a - b).abs() > 1e-8 {
                            return Err(format!("session {k} time {g}: streamed {a} vs recomputed {b}"));
                        }
                    }
                }
            }
            Ok(())
        })();
        t.case(outcome);
    }
    t.verdict("causality")
}

pub fn run_check(name: &str, seed: u64, break_symmetry: bool) -> Verdict {
    let result = catch_unwind(AssertUnwindSafe(|| match name {
        "laplacian" => laplacian(seed, break_symmetry),
        "theorem1" => theorem1(seed),
        "theorem2" => theorem2(seed),
        "stability" => stability(seed),
        "oracle" => oracle(seed),
        "causality" => causality(seed),
        other => Verdict {
            name: other.to_string(),
            passed: false,
            cases: 0,
            violations: 1,
            detail: vec!["unknown check".into()],
        },
    }));
    result.unwrap_or_else(|_| Verdict {
        name: name.to_string(),
        passed: false,
        cases: 0,
        violations: 1,
        detail: vec!["check panicked".into()],
    })
}

pub fn run(run: &Run) -> Result<(), CliError> {
    let checks: Vec<Verdict> =
        run.cfg.verify.checks.iter().map(|c| run_check(c, run.cfg.seed, run.break_symmetry)).collect();
    let passed = checks.iter().all(|c| c.passed);
    for c in &checks {
        println!("{:<10} {} ({} cases, {} violations)", c.name, if c.passed { "pass" } else { "FAIL" }, c.cases, c.violations);
    }
    let doc = VerifyDocument { schema_version: run.cfg.schema_version, config_digest: &run.digest, seed: run.cfg.seed, passed, checks };
    write_json(&run.out.join("verify.json"), &doc)?;
    if passed {
        Ok(())
    } else {
        let failed: Vec<&str> = doc.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(CliError::Verification(failed.join(", ")))
    }
}
