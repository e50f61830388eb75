use gridgp_core::dsse::{
    assemble_problem, meter_mask_for, nuclear_norm, objective, relative_error, solve, truth_matrix, DsseOptions, COLUMNS,
};
use gridgp_core::simlab::{self, stream_rng, toy_pf};
use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

type C64 = Complex<f64>;

#[test]
fn linearization_tracks_nonlinear_load_flow() {
    for seed in 0..10 {
        let (feeder, pf) = toy_pf(9, seed).unwrap();
        let mut rng = stream_rng(seed, "injections");
        let p = DVector::from_fn(9, |_, _| rng.random_range(0.2..1.0) * 1e-3);
        let q = DVector::from_fn(9, |_, _| rng.random_range(0.1..0.5) * 1e-3);
        let loads: Vec<C64> = (0..9).map(|i| C64::new(p[i], q[i])).collect();
        let exact = feeder.solve_nonlinear(&loads).unwrap();
        let linear = pf.voltage(&p, &q);
        let drop: f64 = (0..9).map(|i| (exact[i] - pf.v0[i]).norm_sqr()).sum::<f64>().sqrt();
        let err: f64 = (0..9).map(|i| (exact[i] - linear[i]).norm_sqr()).sum::<f64>().sqrt();
        assert!(err <= 0.01 * drop, "seed {seed}: {err:e} vs drop {drop:e}");
        let mag = pf.magnitude(&p, &q);
        for i in 0..9 {
            let d = exact[i].norm() - pf.magnitude_offset[i];
            assert!((mag[i] - exact[i].norm()).abs() <= 0.01 * d.abs(), "seed {seed} phase {i}");
        }
    }
}

fn load_state(seed: u64) -> (gridgp_core::dsse::LinearPFModel, DMatrix<f64>) {
    let (feeder, pf) = toy_pf(9, seed).unwrap();
    let spec = simlab::ProfileSpec::random_mix(9, 30, (0.3, 1.0), seed);
    let truth = simlab::generate_truth(&spec, &feeder, &pf).unwrap();
    let x = truth.state_matrix(15);
    (pf, x)
}

#[test]
fn pf_penalty_pulls_unmetered_voltages_toward_the_model() {
    for seed in 0..5 {
        let (pf, x) = load_state(seed);
        let mut mask = DMatrix::from_element(9, COLUMNS, false);
        for r in 0..9 {
            mask[(r, 0)] = true;
            mask[(r, 1)] = true;
        }
        let opts = DsseOptions::default();
        let free = solve(&assemble_problem(&x, &pf, &mask, 1e-10, 0.0).unwrap(), &opts).unwrap();
        let pulled = solve(&assemble_problem(&x, &pf, &mask, 1e-10, 1.0).unwrap(), &opts).unwrap();
        assert!(
            pulled.pf_residual_phasor < free.pf_residual_phasor,
            "seed {seed}: {} vs {}",
            pulled.pf_residual_phasor,
            free.pf_residual_phasor
        );
    }
}

#[test]
fn projection_is_idempotent() {
    let (pf, x) = load_state(2);
    let mut rng = stream_rng(2, "omega");
    let mask = DMatrix::from_fn(9, COLUMNS, |_, _| rng.random_bool(0.6));
    let problem = assemble_problem(&x, &pf, &mask, 1e-8, 1.0).unwrap();
    let once = problem.project(&problem.z);
    assert_eq!(problem.project(&once), once);
    assert_eq!(once, problem.z);
}

#[test]
fn fully_observed_noisy_fit_stays_within_tolerance() {
    let normal = Normal::new(0.0, 1e-3).unwrap();
    for seed in 0..5 {
        let (pf, x) = load_state(seed);
        let mut rng = stream_rng(seed, "noise");
        let noisy = x.map(|v| v + normal.sample(&mut rng));
        let noise_energy = (&noisy - &x).norm_squared();
        let problem = assemble_problem(&noisy, &pf, &DMatrix::from_element(9, COLUMNS, true), noise_energy, 1.0).unwrap();
        let sol = solve(&problem, &DsseOptions::default()).unwrap();
        assert!(sol.converged, "seed {seed}");
        assert!(sol.fit_residual.powi(2) <= noise_energy * (1.0 + 1e-9), "seed {seed}");
        assert!(sol.x_hat.column(4).iter().all(|&v| v >= 0.0));
    }
}

#[test]
#[ignore = "ADMM iterates are not monotone in the nuclear norm; the norm rises while the splitting gap closes"]
fn nuclear_norm_does_not_increase_over_iterations() {
    let (pf, x) = load_state(4);
    let mut rng = stream_rng(4, "omega");
    let mask = DMatrix::from_fn(9, COLUMNS, |_, _| rng.random_bool(0.6));
    let scale = x.norm_squared();
    let sol = solve(&assemble_problem(&x, &pf, &mask, 1e-8 * scale, 1.0).unwrap(), &DsseOptions::default()).unwrap();
    let h: Vec<f64> = sol.history.iter().map(|r| r.nuclear_norm).collect();
    let worst = h.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    assert!(worst <= 1e-9 * h[0].max(1.0), "largest increase {worst:e} over {} iterations", h.len());
}

#[test]
fn iteration_log_settles_on_the_reported_solution() {
    let (pf, x) = load_state(4);
    let mut rng = stream_rng(4, "omega");
    let mask = DMatrix::from_fn(9, COLUMNS, |_, _| rng.random_bool(0.6));
    let sol = solve(&assemble_problem(&x, &pf, &mask, 1e-8 * x.norm_squared(), 1.0).unwrap(), &DsseOptions::default()).unwrap();
    assert!(sol.converged);
    assert_eq!(sol.history.len(), sol.iterations);
    let tail = &sol.history[sol.history.len() - 10..];
    for r in tail {
        assert!((r.nuclear_norm - sol.nuclear_norm).abs() <= 1e-5 * sol.nuclear_norm);
    }
    assert!(tail.last().unwrap().primal_residual <= 1e-6 * x.norm());
}

#[test]
fn solution_beats_the_zero_filled_feasible_point() {
    for seed in 0..5 {
        let (pf, x) = load_state(seed);
        let mut rng = stream_rng(seed, "omega");
        let mask = DMatrix::from_fn(9, COLUMNS, |_, _| rng.random_bool(0.6));
        let problem = assemble_problem(&x, &pf, &mask, 1e-8 * x.norm_squared(), 1.0).unwrap();
        let sol = solve(&problem, &DsseOptions::default()).unwrap();
        let reference = problem.project(&problem.z);
        assert!(objective(&problem, &sol.x_hat) <= objective(&problem, &reference), "seed {seed}");
    }
}

#[test]
fn more_metered_phases_give_lower_magnitude_error() {
    let mut better = 0;
    for seed in 0..10 {
        let (pf, x) = load_state(seed);
        let mut rng = stream_rng(seed, "meters");
        let mut order: Vec<usize> = (0..9).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let scale = x.norm_squared();
        let err = |k: usize| {
            let mask = meter_mask_for(9, &order[..k]);
            let sol = solve(&assemble_problem(&x, &pf, &mask, 1e-8 * scale, 100.0).unwrap(), &DsseOptions::default())
                .unwrap();
            sol.column_errors(&x)[4]
        };
        // 8 of 9 phases is about 90% FAD, 5 of 9 about 50%.
        if err(8) < err(5) {
            better += 1;
        }
    }
    assert!(better >= 9, "{better}/10");
}

/// Singular value thresholding for `min ‖X‖* s.t. P_Ω(X) = P_Ω(Z)`, large threshold.
fn svt_oracle(z: &DMatrix<f64>, mask: &DMatrix<bool>) -> DMatrix<f64> {
    let tau = 50.0 * z.norm();
    let project = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| if mask[(r, c)] { m[(r, c)] } else { 0.0 });
    let mut y = DMatrix::zeros(z.nrows(), z.ncols());
    let mut x = y.clone();
    for _ in 0..20_000 {
        let svd = y.clone().svd(true, true);
        let s = svd.singular_values.map(|v: f64| (v - tau).max(0.0));
        x = svd.u.unwrap() * DMatrix::from_diagonal(&s) * svd.v_t.unwrap();
        y += project(&(z - &x)) * 1.2;
    }
    x
}

#[test]
fn completion_without_pf_matches_independent_svt() {
    let (_, pf) = toy_pf(9, 0).unwrap();
    for seed in 0..6 {
        let mut rng = stream_rng(seed, "rank-two");
        // Nonnegative factors keep the |v| column a valid magnitude.
        let u = DMatrix::from_fn(9, 2, |_, _| rng.random_range(0.0..1.5));
        let v = DMatrix::from_fn(2, COLUMNS, |_, _| rng.random_range(0.0..1.5));
        let x = &u * &v;
        let mask = DMatrix::from_fn(9, COLUMNS, |_, _| rng.random_bool(0.6));
        let problem = assemble_problem(&x, &pf, &mask, 1e-12 * x.norm_squared(), 0.0).unwrap();
        let sol = solve(&problem, &DsseOptions::default()).unwrap();
        let oracle = svt_oracle(&x, &mask);
        let (ours, theirs) = (sol.nuclear_norm, nuclear_norm(&oracle));
        assert!((ours - theirs).abs() <= 2e-3 * theirs, "seed {seed}: {ours} vs {theirs}");
        assert!(sol.fit_residual <= 1e-5 * x.norm());
        assert!(relative_error(&sol.x_hat, &oracle) < 0.05, "seed {seed}");
    }
}

#[test]
fn truth_matrix_layout() {
    let (_, pf) = toy_pf(4, 1).unwrap();
    let p = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
    let q = DVector::from_vec(vec![0.01, 0.02, 0.03, 0.04]);
    let x = truth_matrix(&pf, &p, &q);
    let v = pf.voltage(&p, &q);
    for i in 0..4 {
        assert_eq!(x[(i, 0)], p[i]);
        assert_eq!(x[(i, 1)], q[i]);
        assert_eq!(x[(i, 2)], v[i].re);
        assert_eq!(x[(i, 3)], v[i].im);
    }
}
