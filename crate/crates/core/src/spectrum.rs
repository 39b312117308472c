//! Curvature and trajectory diagnostics: Lanczos on finite-difference
//! Hessian-vector products, and the explained-variance profile of the
//! deviation buffer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{check_len, Error, Result};
use crate::linalg::{self, axpy, dot, norm};
use crate::net::{Architecture, ParamVector};
use crate::subspace::deviation_svd;
use crate::train::{DeviationBuffer, NetObjective, Objective};

pub const DEFAULT_HVP_EPS: f64 = 1e-4;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Descending.
    pub eigenvalue_estimates: Vec<f64>,
    /// Descending fractions of total trajectory variance.
    pub explained_variance: Vec<f64>,
}

/// Hessian-vector product of the full-batch mean loss by central differences
/// along `v / |v|`, rescaled by `|v|`.
pub fn hvp<O: Objective + ?Sized>(
    objective: &O,
    params: &[f64],
    v: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let dim = objective.num_params();
    check_len("parameters", dim, params.len())?;
    check_len("direction", dim, v.len())?;
    let v_norm = norm(v);
    if !(v_norm > f64::MIN_POSITIVE) || !v_norm.is_finite() {
        return Err(Error::DegenerateGeometry {
            what: "Hessian-vector direction",
            norm: v_norm,
        });
    }
    let all: Vec<usize> = (0..objective.num_examples()).collect();
    let shifted = |sign: f64| -> Result<Vec<f64>> {
        let mut w = params.to_vec();
        axpy(sign * eps / v_norm, v, &mut w);
        let mut g = vec![0.0; dim];
        objective.loss_and_grad(&w, &all, &mut g)?;
        Ok(g)
    };
    let (plus, minus) = rayon::join(|| shifted(1.0), || shifted(-1.0));
    let (plus, minus) = (plus?, minus?);
    let scale = v_norm / (2.0 * eps);
    Ok(plus
        .iter()
        .zip(&minus)
        .map(|(a, b)| (a - b) * scale)
        .collect())
}

/// Hessian-vector product of the mean negative log-likelihood with respect to
/// the network weights, holding the global noise parameter fixed.
pub fn network_hvp(
    arch: &Architecture,
    params: &ParamVector,
    data: &Dataset,
    v: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    params.check(arch)?;
    check_len("direction", params.len(), v.len())?;
    let objective = NetObjective::new(arch, data);
    let mut padded = v.to_vec();
    padded.push(0.0);
    let mut out = hvp(&objective, &params.to_flat(), &padded, eps)?;
    out.pop();
    Ok(out)
}

/// Ritz values of a symmetric operator after `k_iters` Lanczos steps with
/// full reorthogonalization, descending. Stops early on breakdown.
pub fn lanczos<F>(mut matvec: F, dim: usize, k_iters: usize, seed: u64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if k_iters == 0 || k_iters > dim {
        return Err(Error::InvalidConfig(format!(
            "Lanczos needs 1 <= iterations <= {dim}, got {k_iters}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n0 = norm(&q);
    linalg::scale(1.0 / n0, &mut q);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k_iters);
    let mut alphas = Vec::with_capacity(k_iters);
    let mut betas: Vec<f64> = Vec::with_capacity(k_iters);
    let mut scale_est = 0.0_f64;
    for _ in 0..k_iters {
        let mut w = matvec(&q)?;
        check_len("operator output", dim, w.len())?;
        let alpha = dot(&q, &w);
        basis.push(q);
        alphas.push(alpha);
        // Two passes of Gram-Schmidt against every previous vector.
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &w);
                axpy(-c, b, &mut w);
            }
        }
        let beta = norm(&w);
        scale_est = scale_est.max(alpha.abs() + beta);
        if alphas.len() == k_iters || beta <= 1e-10 * scale_est.max(f64::MIN_POSITIVE) {
            break;
        }
        betas.push(beta);
        linalg::scale(1.0 / beta, &mut w);
        q = w;
    }
    let k = alphas.len();
    let mut t = vec![0.0; k * k];
    for i in 0..k {
        t[i * k + i] = alphas[i];
        if i + 1 < k {
            t[i * k + i + 1] = betas[i];
            t[(i + 1) * k + i] = betas[i];
        }
    }
    Ok(linalg::symmetric_eigen(&t, k).values)
}

/// Fraction of trajectory variance along each principal direction, descending.
pub fn trajectory_spectrum(buffer: &DeviationBuffer) -> Result<Vec<f64>> {
    let svd = deviation_svd(buffer)?;
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    Ok(svd.singular_values.iter().map(|s| s * s / total).collect())
}
