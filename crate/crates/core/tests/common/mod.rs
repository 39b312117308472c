#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subspace_inference::dataset::{Dataset, Targets};
use subspace_inference::error::Result;
use subspace_inference::net::{Activation, Architecture, Head, ParamVector};
use subspace_inference::posterior::TemperedTarget;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Small random architecture: 1-3 inputs, up to two hidden layers, any head.
pub fn random_arch(rng: &mut ChaCha8Rng) -> Architecture {
    let depth = rng.random_range(1..=2);
    let hidden = (0..depth).map(|_| rng.random_range(2..=6)).collect();
    let head = if rng.random_bool(0.5) {
        Head::GaussianHeteroscedastic
    } else {
        Head::Categorical {
            num_classes: rng.random_range(2..=4),
        }
    };
    let activation = if rng.random_bool(0.5) {
        Activation::Tanh
    } else {
        Activation::Relu
    };
    Architecture::new(
        rng.random_range(1..=3),
        hidden,
        head,
        activation,
        rng.random_bool(0.3),
    )
    .unwrap()
}

pub fn random_params(arch: &Architecture, rng: &mut ChaCha8Rng, scale: f64) -> ParamVector {
    ParamVector {
        weights: (0..arch.num_weights())
            .map(|_| scale * normal(rng))
            .collect(),
        raw_global_noise: normal(rng) * 0.5,
    }
}

pub fn random_dataset(arch: &Architecture, rng: &mut ChaCha8Rng, n: usize) -> Dataset {
    let inputs = normals(rng, n * arch.input_dim);
    let targets = match arch.head {
        Head::GaussianHeteroscedastic => Targets::Real(normals(rng, n)),
        Head::Categorical { num_classes } => {
            Targets::Class((0..n).map(|_| rng.random_range(0..num_classes)).collect())
        }
    };
    Dataset::new(inputs, arch.input_dim, targets).unwrap()
}

pub fn regression_arch(input_dim: usize, hidden: Vec<usize>) -> Architecture {
    Architecture::new(
        input_dim,
        hidden,
        Head::GaussianHeteroscedastic,
        Activation::Tanh,
        false,
    )
    .unwrap()
}

/// `(1/T) log p(D|z) = -0.5 (z - m)^T A (z - m)`: a Gaussian likelihood with
/// precision `A`, paired with the isotropic prior.
pub struct GaussianTarget {
    pub m: Vec<f64>,
    pub a: DMatrix<f64>,
    pub prior_std: f64,
}

impl GaussianTarget {
    /// Closed-form posterior mean and covariance.
    pub fn posterior(&self) -> (DVector<f64>, DMatrix<f64>) {
        let k = self.m.len();
        let prec = &self.a + DMatrix::identity(k, k) / (self.prior_std * self.prior_std);
        let cov = prec.clone().try_inverse().unwrap();
        let mean = &cov * (&self.a * DVector::from_column_slice(&self.m));
        (mean, cov)
    }
}

impl TemperedTarget for GaussianTarget {
    fn dim(&self) -> usize {
        self.m.len()
    }

    fn prior_std(&self) -> f64 {
        self.prior_std
    }

    fn tempered_log_likelihood(&self, z: &[f64]) -> Result<f64> {
        let d = DVector::from_column_slice(z) - DVector::from_column_slice(&self.m);
        Ok(-0.5 * d.dot(&(&self.a * &d)))
    }

    fn grad_tempered_log_likelihood(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = DVector::from_column_slice(z) - DVector::from_column_slice(&self.m);
        let ad = &self.a * &d;
        Ok((-0.5 * d.dot(&ad), (-ad).iter().copied().collect()))
    }
}

/// Mean and batch-means standard error of a correlated series.
pub fn mean_and_se(xs: &[f64], batches: usize) -> (f64, f64) {
    let n = xs.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| xs[b * n..(b + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (m, (var / batches as f64).sqrt())
}

pub fn std_dev(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Row-major `rows x cols` matrix from a list of equal-length rows.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

/// `L(x, y) = (x^2 - 1)^2 + b (y - a (1 - x^2))^2`: minima at `(±1, 0)`
/// joined by a curved valley through `(0, a)`. The straight segment between
/// the minima crosses `(0, 0)` where `L = 1 + b a^2`.
pub struct TwoBasin {
    pub a: f64,
    pub b: f64,
}

impl TwoBasin {
    pub fn value(&self, w: &[f64]) -> f64 {
        let (x, y) = (w[0], w[1]);
        (x * x - 1.0).powi(2) + self.b * (y - self.a * (1.0 - x * x)).powi(2)
    }

    /// Largest loss over `n + 1` evenly spaced points of a path `t -> w(t)`.
    pub fn max_along(&self, n: usize, path: impl Fn(f64) -> Vec<f64>) -> f64 {
        (0..=n)
            .map(|i| self.value(&path(i as f64 / n as f64)))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

impl subspace_inference::train::Objective for TwoBasin {
    fn num_params(&self) -> usize {
        2
    }

    fn num_examples(&self) -> usize {
        1
    }

    fn loss_and_grad(&self, w: &[f64], _batch: &[usize], grad: &mut [f64]) -> Result<f64> {
        let (x, y) = (w[0], w[1]);
        let r = y - self.a * (1.0 - x * x);
        grad[0] = 4.0 * x * (x * x - 1.0) + 2.0 * self.b * r * 2.0 * self.a * x;
        grad[1] = 2.0 * self.b * r;
        Ok(self.value(w))
    }
}

/// Correlated 2-D likelihood used for the sampler checks.
pub fn correlated_conjugate() -> GaussianTarget {
    GaussianTarget {
        m: vec![1.5, -1.0],
        a: DMatrix::from_row_slice(2, 2, &[2.0, 0.8, 0.8, 1.0]),
        prior_std: 1.0,
    }
}

/// Axis-aligned 2-D likelihood: the exact posterior is itself fully factorized,
/// so a mean-field fit can match it.
pub fn diagonal_conjugate() -> GaussianTarget {
    GaussianTarget {
        m: vec![2.5, -4.0],
        a: DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]),
        prior_std: 1.0,
    }
}
