//! RBF temporal kernel, task-correlation matrix, and Kronecker-structured
//! prior covariances.
//!
//! Every multi-task vector in this crate is flattened task-major, then node,
//! then time: `index = task·(M·n) + node·n + time`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative nugget added on coincident times: `k'(x, x') = k(x, x') + 1e-8·σ_s²·[x = x']`.
pub const JITTER_REL: f64 = 1e-8;
pub const MAX_LENGTHSCALE: f64 = 1e6;

/// How observation noise enters the covariance blocks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// Noise only on the observation self-covariance; missing entries are dropped.
    #[default]
    Standard,
    /// `σ_ε²·I` on every square block as literally written, missing entries zero-filled
    /// and substituted by the predicted mean.
    PaperLiteral,
}

impl std::str::FromStr for NoiseMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "paper-literal" => Ok(Self::PaperLiteral),
            other => Err(Error::Parse(format!("unknown noise mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparameters {
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl Hyperparameters {
    pub fn new(lengthscale: f64, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        let hp = Self { lengthscale, signal_variance, noise_variance };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.lengthscale) || self.lengthscale > MAX_LENGTHSCALE {
            return Err(Error::InvalidParameter(format!("lengthscale {}", self.lengthscale)));
        }
        if !ok(self.signal_variance) {
            return Err(Error::InvalidParameter(format!("signal_variance {}", self.signal_variance)));
        }
        if !ok(self.noise_variance) {
            return Err(Error::InvalidParameter(format!("noise_variance {}", self.noise_variance)));
        }
        Ok(())
    }

    pub fn jitter(&self) -> f64 {
        JITTER_REL * self.signal_variance
    }
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self { lengthscale: 10.0, signal_variance: 1.0, noise_variance: 1e-3 }
    }
}

pub fn rbf(x1: f64, x2: f64, hp: &Hyperparameters) -> f64 {
    let d = x1 - x2;
    hp.signal_variance * (-(d * d) / (2.0 * hp.lengthscale * hp.lengthscale)).exp()
}

pub fn kernel_matrix(xa: &[f64], xb: &[f64], hp: &Hyperparameters) -> DMatrix<f64> {
    DMatrix::from_fn(xa.len(), xb.len(), |i, j| rbf(xa[i], xb[j], hp))
}

/// Kernel block with the nugget applied wherever the two times coincide.
pub fn jittered_kernel_matrix(xa: &[f64], xb: &[f64], hp: &Hyperparameters) -> DMatrix<f64> {
    let j = hp.jitter();
    DMatrix::from_fn(xa.len(), xb.len(), |r, c| {
        let k = rbf(xa[r], xb[c], hp);
        if xa[r] == xb[c] {
            k + j
        } else {
            k
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskKernel {
    matrix: DMatrix<f64>,
}

impl TaskKernel {
    pub fn identity(d: usize) -> Self {
        Self { matrix: DMatrix::identity(d, d) }
    }

    /// Unit-diagonal correlation `K_c[i][j] = ρ·s_i·s_j` (i ≠ j). The signs orient
    /// tasks that move against each other, e.g. load and voltage magnitude.
    pub fn equicorrelated(signs: &[f64], rho: f64) -> Result<Self> {
        if !(rho > -1.0 && rho < 1.0) {
            return Err(Error::InvalidParameter(format!("task correlation {rho} outside (-1, 1)")));
        }
        let d = signs.len();
        let m = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho * signs[i] * signs[j] });
        Self::from_matrix(m)
    }

    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let (r, c) = matrix.shape();
        if r != c || r == 0 {
            return Err(Error::NotSquare { rows: r, cols: c });
        }
        if linalg::max_asymmetry(&matrix) > 1e-12 {
            return Err(Error::InvalidParameter("task kernel is not symmetric".into()));
        }
        if matrix.diagonal().iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidParameter("task kernel diagonal must be positive".into()));
        }
        if linalg::sym_eigenvalues(&matrix)[0] < -1e-10 {
            return Err(Error::InvalidParameter("task kernel is not positive semidefinite".into()));
        }
        Ok(Self { matrix })
    }

    pub fn tasks(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

#[derive(Debug, Clone)]
pub struct StructuredCovariance {
    pub block_task: DMatrix<f64>,
    pub block_space: DMatrix<f64>,
    pub block_time: DMatrix<f64>,
    pub assembled: DMatrix<f64>,
    pub noise_added: bool,
}

/// `task ⊗ space ⊗ time`, plus `σ_ε²·I` when requested on a square block.
pub fn assemble_prior(
    task: &TaskKernel,
    space: &DMatrix<f64>,
    time_block: &DMatrix<f64>,
    add_noise: bool,
    hp: &Hyperparameters,
) -> Result<StructuredCovariance> {
    let (sr, sc) = space.shape();
    if sr != sc {
        return Err(Error::dims(format!("space block is {sr}x{sc}")));
    }
    if linalg::max_asymmetry(space) > 1e-9 {
        return Err(Error::dims("space block is not symmetric"));
    }
    let mut assembled = linalg::kron3(task.matrix(), space, time_block);
    if add_noise {
        let (rows, cols) = assembled.shape();
        if rows != cols {
            return Err(Error::NoiseOnRectangular { rows, cols });
        }
        for i in 0..rows {
            assembled[(i, i)] += hp.noise_variance;
        }
    }
    Ok(StructuredCovariance {
        block_task: task.matrix().clone(),
        block_space: space.clone(),
        block_time: time_block.clone(),
        assembled,
        noise_added: add_noise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hp(l: f64, s: f64) -> Hyperparameters {
        Hyperparameters::new(l, s, 0.01).unwrap()
    }

    #[test]
    fn rbf_values() {
        assert_eq!(rbf(3.0, 3.0, &hp(2.0, 1.7)), 1.7);
        // exp(-0.5) = 0.60653065971263342360... (independent reference value)
        assert!((rbf(0.0, 1.0, &hp(1.0, 1.0)) - 0.606_530_659_712_633_4).abs() < 1e-15);
    }

    #[test]
    fn kernel_matrix_values() {
        assert_eq!(kernel_matrix(&[0.0], &[0.0], &hp(1.0, 2.0)), DMatrix::from_element(1, 1, 2.0));
        let k = kernel_matrix(&[0.0, 1.0], &[0.0, 1.0], &hp(1.0, 1.0));
        let e = (-0.5f64).exp();
        assert_eq!(k, DMatrix::from_row_slice(2, 2, &[1.0, e, e, 1.0]));
    }

    #[test]
    fn hyperparameter_validation() {
        assert!(Hyperparameters::new(0.0, 1.0, 1.0).is_err());
        assert!(Hyperparameters::new(1.0, -1.0, 1.0).is_err());
        assert!(Hyperparameters::new(1.0, 1.0, 0.0).is_err());
        assert!(Hyperparameters::new(2e6, 1.0, 1.0).is_err());
    }

    #[test]
    fn task_kernel_checks() {
        let k = TaskKernel::equicorrelated(&[1.0, 1.0, -1.0], 0.6).unwrap();
        assert_eq!(k.matrix()[(0, 2)], -0.6);
        assert_eq!(k.matrix()[(0, 1)], 0.6);
        assert!(TaskKernel::equicorrelated(&[1.0, 1.0], 1.0).is_err());
        // Equicorrelation below -1/(d-1) is indefinite.
        assert!(TaskKernel::equicorrelated(&[1.0, 1.0, 1.0], -0.6).is_err());
    }

    #[test]
    fn scalar_prior_with_noise() {
        let h = Hyperparameters::new(1.0, 1.0, 0.01).unwrap();
        let c = assemble_prior(&TaskKernel::identity(1), &DMatrix::identity(1, 1), &DMatrix::from_element(1, 1, 1.0), true, &h)
            .unwrap();
        assert!((c.assembled[(0, 0)] - 1.01).abs() < 1e-15);
    }

    #[test]
    fn identity_blocks_give_identity() {
        let h = Hyperparameters::default();
        let c = assemble_prior(&TaskKernel::identity(2), &DMatrix::identity(2, 2), &DMatrix::identity(2, 2), false, &h).unwrap();
        assert_eq!(c.assembled, DMatrix::identity(8, 8));
    }

    #[test]
    fn noise_on_rectangular_is_rejected() {
        let h = Hyperparameters::default();
        let r = assemble_prior(&TaskKernel::identity(1), &DMatrix::identity(2, 2), &DMatrix::zeros(3, 1), true, &h);
        assert!(matches!(r, Err(Error::NoiseOnRectangular { rows: 6, cols: 2 })));
    }

    #[test]
    fn index_order_contract() {
        // Single-entry indicator blocks land at task·(M·n) + node·n + time.
        let (d, m, n) = (2, 3, 4);
        let h = Hyperparameters::default();
        for (t, v, s) in [(1usize, 2usize, 3usize), (0, 1, 0), (1, 0, 2)] {
            let mut kt = DMatrix::zeros(d, d);
            kt[(t, t)] = 1.0;
            let mut ks = DMatrix::zeros(m, m);
            ks[(v, v)] = 1.0;
            let mut kx = DMatrix::zeros(n, n);
            kx[(s, s)] = 1.0;
            let task = TaskKernel { matrix: kt };
            let c = assemble_prior(&task, &ks, &kx, false, &h).unwrap();
            let idx = t * (m * n) + v * n + s;
            assert_eq!(c.assembled[(idx, idx)], 1.0);
            assert_eq!(c.assembled.sum(), 1.0);
        }
    }

    fn random_psd(k: usize, vals: &[f64]) -> DMatrix<f64> {
        let b = DMatrix::from_fn(k, k, |i, j| vals[(i * k + j) % vals.len()]);
        &b * b.transpose()
    }

    proptest! {
        #[test]
        fn kronecker_matches_triple_loop(vals in proptest::collection::vec(-1.0f64..1.0, 16)) {
            let (d, m, n) = (2usize, 3usize, 4usize);
            let a = random_psd(d, &vals) + DMatrix::identity(d, d);
            let b = random_psd(m, &vals[3..]);
            let c = random_psd(n, &vals[5..]);
            let task = TaskKernel::from_matrix(a.clone()).unwrap();
            let cov = assemble_prior(&task, &b, &c, false, &Hyperparameters::default()).unwrap();
            let mut naive = DMatrix::zeros(d * m * n, d * m * n);
            for t1 in 0..d { for v1 in 0..m { for s1 in 0..n {
                for t2 in 0..d { for v2 in 0..m { for s2 in 0..n {
                    naive[(t1 * m * n + v1 * n + s1, t2 * m * n + v2 * n + s2)] = a[(t1, t2)] * b[(v1, v2)] * c[(s1, s2)];
                }}}
            }}}
            prop_assert!((&cov.assembled - &naive).abs().max() <= 1e-12);
            let tr = a.trace() * b.trace() * c.trace();
            prop_assert!((cov.assembled.trace() - tr).abs() <= 1e-8 * tr.abs().max(1.0));
        }

        #[test]
        fn kernel_symmetric_and_bounded(a in -50.0f64..50.0, b in -50.0f64..50.0, l in 0.1f64..20.0, s in 0.1f64..5.0) {
            let h = hp(l, s);
            prop_assert_eq!(rbf(a, b, &h), rbf(b, a, &h));
            let k = kernel_matrix(&[a, b, a + 1.0], &[b, a], &h);
            prop_assert!(k.iter().all(|&v| v <= s + 1e-12));
        }

        #[test]
        fn jittered_gram_is_positive_definite(mut xs in proptest::collection::btree_set(0i32..500, 2..40), l in 0.5f64..60.0) {
            let x: Vec<f64> = std::mem::take(&mut xs).into_iter().map(f64::from).collect();
            let h = hp(l, 1.3);
            let k = jittered_kernel_matrix(&x, &x, &h);
            prop_assert!(k.cholesky().is_some());
        }
    }
}
