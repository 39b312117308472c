mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use subspace_inference::dataset::{Dataset, Targets};
use subspace_inference::error::Result;
use subspace_inference::net::{forward_batch, init_weights, NetOutput};
use subspace_inference::train::{
    run_network_swa, run_swa_with, train_network, train_sgd, Objective, TrainConfig,
};

/// Example `i` contributes `0.5 * sum_j h_j (w_j - c_ij)^2`, so mini-batches
/// give genuinely noisy gradients.
struct NoisyQuadratic {
    h: Vec<f64>,
    centers: Vec<Vec<f64>>,
}

impl Objective for NoisyQuadratic {
    fn num_params(&self) -> usize {
        self.h.len()
    }

    fn num_examples(&self) -> usize {
        self.centers.len()
    }

    fn loss_and_grad(&self, params: &[f64], batch: &[usize], grad: &mut [f64]) -> Result<f64> {
        grad.fill(0.0);
        let mut loss = 0.0;
        for &i in batch {
            for j in 0..params.len() {
                let r = params[j] - self.centers[i][j];
                loss += 0.5 * self.h[j] * r * r;
                grad[j] += self.h[j] * r;
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok(loss / n)
    }
}

fn config(lr: f64, steps: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        momentum: 0.9,
        weight_decay: 0.0,
        num_steps: steps,
        capture_frequency: 1,
        max_deviation_cols: 20,
        batch_size: batch,
        seed: 7,
    }
}

fn quadratic() -> NoisyQuadratic {
    let mut r = rng(1);
    NoisyQuadratic {
        h: vec![1.0, 3.0],
        centers: (0..16).map(|_| normals(&mut r, 2)).collect(),
    }
}

#[test]
fn swa_mean_matches_logged_iterates() {
    let obj = quadratic();
    let mut cfg = config(0.05, 60, 4);
    cfg.capture_frequency = 3;
    let start = vec![2.0, -1.5];
    let mut log = vec![start.clone()];
    let out = run_swa_with(&obj, &start, &cfg, |w| log.push(w.to_vec())).unwrap();
    assert_eq!(log.len(), 21);
    for j in 0..2 {
        let brute = log.iter().map(|w| w[j]).sum::<f64>() / log.len() as f64;
        assert!(
            rel_err(out.mean[j], brute, 1e-300) < 1e-12,
            "{} vs {brute}",
            out.mean[j]
        );
    }
}

#[test]
fn buffer_holds_last_deviations_in_order() {
    let obj = quadratic();
    let mut cfg = config(0.05, 40, 4);
    cfg.capture_frequency = 2;
    cfg.max_deviation_cols = 5;
    let start = vec![0.5, 0.5];
    let mut log = vec![start.clone()];
    let out = run_swa_with(&obj, &start, &cfg, |w| log.push(w.to_vec())).unwrap();
    assert_eq!(out.buffer.n_captured(), 20);
    assert_eq!(out.buffer.num_columns(), 5);
    // Deviation k is iterate k minus the mean over models 0..=k.
    let expected: Vec<Vec<f64>> = (16..=20)
        .map(|k| {
            (0..2)
                .map(|j| log[k][j] - log[..=k].iter().map(|w| w[j]).sum::<f64>() / (k + 1) as f64)
                .collect()
        })
        .collect();
    for (col, exp) in out.buffer.columns().zip(&expected) {
        for (a, b) in col.iter().zip(exp) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

/// `y = 2x + 1` plus N(0, 0.1^2) noise.
fn line_data() -> (Dataset, Vec<f64>, Vec<f64>) {
    let mut r = rng(4);
    let x: Vec<f64> = (0..64).map(|i| -1.0 + 2.0 * i as f64 / 63.0).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&x| 2.0 * x + 1.0 + 0.1 * normal(&mut r))
        .collect();
    (
        Dataset::new(x.clone(), 1, Targets::Real(y.clone())).unwrap(),
        x,
        y,
    )
}

#[test]
fn linear_regression_reaches_least_squares_fit() {
    let (data, x, y) = line_data();
    let design = DMatrix::from_fn(x.len(), 2, |i, j| if j == 0 { x[i] } else { 1.0 });
    let beta = design
        .clone()
        .svd(true, true)
        .solve(&DVector::from_column_slice(&y), 1e-12)
        .unwrap();
    let ls_rmse =
        ((&design * beta - DVector::from_column_slice(&y)).norm_squared() / x.len() as f64).sqrt();
    assert!(ls_rmse < 0.1);

    let arch = regression_arch(1, vec![]);
    let p0 = init_weights(&arch, 0);
    let (p, trace) = train_network(&arch, &p0, &data, &config(0.02, 8000, 16)).unwrap();
    let head: f64 = trace[..50].iter().map(|t| t.loss).sum::<f64>() / 50.0;
    let tail: f64 = trace[trace.len() - 50..]
        .iter()
        .map(|t| t.loss)
        .sum::<f64>()
        / 50.0;
    assert!(tail < head);

    let preds = forward_batch(&arch, &p, &x).unwrap();
    let sse: f64 = preds
        .iter()
        .zip(&y)
        .map(|(o, y)| match o {
            NetOutput::Gaussian { mean, .. } => (mean - y).powi(2),
            _ => unreachable!(),
        })
        .sum();
    let rmse = (sse / x.len() as f64).sqrt();
    assert!(rmse < 0.1, "rmse {rmse}");
    assert!(
        rmse < ls_rmse * 1.05,
        "rmse {rmse} vs least squares {ls_rmse}"
    );
}

#[test]
fn training_is_bit_reproducible() {
    let (data, _, _) = line_data();
    let arch = regression_arch(1, vec![6]);
    let p0 = init_weights(&arch, 3);
    let cfg = config(0.01, 200, 8);
    let a = train_network(&arch, &p0, &data, &cfg).unwrap();
    let b = train_network(&arch, &p0, &data, &cfg).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    let sa = run_network_swa(&arch, &a.0, &data, &cfg).unwrap();
    let sb = run_network_swa(&arch, &a.0, &data, &cfg).unwrap();
    assert_eq!(sa.w_swa, sb.w_swa);
    assert_eq!(sa.buffer, sb.buffer);
}

#[test]
fn zero_step_size_returns_start() {
    let obj = quadratic();
    let start = vec![0.25, -4.0];
    let out = train_sgd(&obj, &start, &config(0.0, 30, 3)).unwrap();
    assert_eq!(out.params, start);
}
