//! Bayesian model averaging over subspace samples and predictive metrics.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{Standardization, Targets};
use crate::error::{check_len, Error, Result};
use crate::inference::SampleSet;
use crate::net::{self, Architecture, NetOutput};
use crate::subspace::Subspace;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959_964;

/// Relative floor (times the global noise variance) for a mixture variance
/// lost to cancellation.
const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub enum PredictiveSummary {
    Regression(RegressionPredictive),
    Classification { probabilities: Vec<Vec<f64>> },
}

/// Gaussian mixture predictive in standardized target units.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionPredictive {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Per-sample means and variances, `[sample][point]`.
    pub component_means: Vec<Vec<f64>>,
    pub component_variances: Vec<Vec<f64>>,
}

impl PredictiveSummary {
    pub fn len(&self) -> usize {
        match self {
            PredictiveSummary::Regression(r) => r.mean.len(),
            PredictiveSummary::Classification { probabilities } => probabilities.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn regression(&self) -> Option<&RegressionPredictive> {
        match self {
            PredictiveSummary::Regression(r) => Some(r),
            PredictiveSummary::Classification { .. } => None,
        }
    }
}

/// Mean and variance of an equally weighted Gaussian mixture.
///
/// The variance is `mean(var_j) + mean((mu_j - mu)^2)`, which equals
/// `mean(var_j + mu_j^2) - mu^2` but does not cancel when the components agree.
pub fn mixture_moments(means: &[f64], variances: &[f64]) -> Result<(f64, f64)> {
    check_len("mixture variances", means.len(), variances.len())?;
    if means.is_empty() {
        return Err(Error::InvalidConfig(
            "mixture needs at least one component".into(),
        ));
    }
    let j = means.len() as f64;
    let mu = means.iter().sum::<f64>() / j;
    let within = variances.iter().sum::<f64>() / j;
    let between = means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / j;
    Ok((mu, within + between))
}

/// Averages per-sample predictions at `inputs` (standardized, row-major).
pub fn bma_predict(
    arch: &Architecture,
    subspace: &Subspace,
    samples: &SampleSet,
    inputs: &[f64],
) -> Result<PredictiveSummary> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig(
            "prediction needs at least one sample".into(),
        ));
    }
    let per_sample: Vec<(Vec<NetOutput>, f64)> = samples
        .samples
        .par_iter()
        .map(|z| {
            let w = subspace.embed(z)?;
            let s = w.global_noise_scale();
            Ok((net::forward_batch(arch, &w, inputs)?, s))
        })
        .collect::<Result<_>>()?;
    let n = per_sample[0].0.len();
    let j = per_sample.len() as f64;
    if !arch.is_regression() {
        let classes = arch.output_dim();
        let mut probabilities = vec![vec![0.0; classes]; n];
        for (outs, _) in &per_sample {
            for (acc, out) in probabilities.iter_mut().zip(outs) {
                let p = out.probabilities().expect("categorical head");
                for (a, b) in acc.iter_mut().zip(p) {
                    *a += b / j;
                }
            }
        }
        return Ok(PredictiveSummary::Classification { probabilities });
    }
    let mut component_means = Vec::with_capacity(per_sample.len());
    let mut component_variances = Vec::with_capacity(per_sample.len());
    for (outs, _) in &per_sample {
        let (m, v): (Vec<f64>, Vec<f64>) = outs
            .iter()
            .map(|o| match o {
                NetOutput::Gaussian { mean, variance } => (*mean, *variance),
                NetOutput::Categorical { .. } => unreachable!("regression head"),
            })
            .unzip();
        component_means.push(m);
        component_variances.push(v);
    }
    let noise_var = per_sample.iter().map(|(_, s)| s * s).sum::<f64>() / j;
    let mut mean = Vec::with_capacity(n);
    let mut variance = Vec::with_capacity(n);
    let mut mus = vec![0.0; per_sample.len()];
    let mut vars = vec![0.0; per_sample.len()];
    for i in 0..n {
        for k in 0..per_sample.len() {
            mus[k] = component_means[k][i];
            vars[k] = component_variances[k][i];
        }
        let (mu, mut var) = mixture_moments(&mus, &vars)?;
        if !(var > 0.0) {
            let floor = noise_var * VARIANCE_FLOOR;
            warn!("predictive variance {var} at point {i} clamped to {floor}");
            var = floor;
        }
        mean.push(mu);
        variance.push(var);
    }
    Ok(PredictiveSummary::Regression(RegressionPredictive {
        mean,
        variance,
        component_means,
        component_variances,
    }))
}

/// How the 95% interval for coverage is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalMode {
    /// `mean +- 1.959964 * std` of the moment-matched Gaussian.
    #[default]
    Gaussian,
    /// 2.5% and 97.5% quantiles of the mixture itself.
    MixtureQuantile,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean negative log-likelihood in standardized target units.
    pub nll_norm: f64,
    /// Mean negative log-likelihood in original target units.
    pub nll_unnorm: f64,
    pub rmse: Option<f64>,
    pub accuracy: Option<f64>,
    pub coverage95: Option<f64>,
}

/// Scores a predictive summary against targets.
///
/// Real targets are expected in standardized units; `standardization` maps
/// them back for RMSE and the unnormalized likelihood.
pub fn evaluate(
    summary: &PredictiveSummary,
    targets: &Targets,
    standardization: &Standardization,
    mode: IntervalMode,
) -> Result<Metrics> {
    check_len("targets", summary.len(), targets.len())?;
    if summary.is_empty() {
        return Err(Error::InvalidConfig(
            "cannot evaluate on zero points".into(),
        ));
    }
    match (summary, targets) {
        (PredictiveSummary::Regression(r), Targets::Real(y)) => {
            let n = y.len() as f64;
            let ln_s = standardization.target_std.ln();
            let mut nll = 0.0;
            let mut sq = 0.0;
            let mut covered = 0usize;
            for i in 0..y.len() {
                let (mu, var) = (r.mean[i], r.variance[i]);
                let d = y[i] - mu;
                nll += 0.5 * (LN_2PI + var.ln() + d * d / var);
                let err = standardization.restore_target(mu) - standardization.restore_target(y[i]);
                sq += err * err;
                let (lo, hi) = match mode {
                    IntervalMode::Gaussian => (mu - Z95 * var.sqrt(), mu + Z95 * var.sqrt()),
                    IntervalMode::MixtureQuantile => {
                        let means: Vec<f64> = r.component_means.iter().map(|m| m[i]).collect();
                        let vars: Vec<f64> = r.component_variances.iter().map(|v| v[i]).collect();
                        (
                            mixture_quantile(&means, &vars, 0.025),
                            mixture_quantile(&means, &vars, 0.975),
                        )
                    }
                };
                if lo <= y[i] && y[i] <= hi {
                    covered += 1;
                }
            }
            let nll_norm = nll / n;
            Ok(Metrics {
                nll_norm,
                nll_unnorm: nll_norm + ln_s,
                rmse: Some((sq / n).sqrt()),
                accuracy: None,
                coverage95: Some(covered as f64 / n),
            })
        }
        (PredictiveSummary::Classification { probabilities }, Targets::Class(y)) => {
            let n = y.len() as f64;
            let mut nll = 0.0;
            let mut correct = 0usize;
            for (p, &c) in probabilities.iter().zip(y) {
                if c >= p.len() {
                    return Err(Error::IndexOutOfRange {
                        index: c,
                        len: p.len(),
                    });
                }
                nll -= p[c].ln();
                let argmax = p
                    .iter()
                    .enumerate()
                    .fold(0, |best, (k, v)| if *v > p[best] { k } else { best });
                if argmax == c {
                    correct += 1;
                }
            }
            Ok(Metrics {
                nll_norm: nll / n,
                nll_unnorm: nll / n,
                rmse: None,
                accuracy: Some(correct as f64 / n),
                coverage95: None,
            })
        }
        _ => Err(Error::Format(
            "predictive summary and targets disagree on task type".into(),
        )),
    }
}

/// Quantile of an equally weighted Gaussian mixture, by bisection on its CDF.
pub fn mixture_quantile(means: &[f64], variances: &[f64], q: f64) -> f64 {
    let comps: Vec<Normal> = means
        .iter()
        .zip(variances)
        .map(|(&m, &v)| Normal::new(m, v.max(f64::MIN_POSITIVE).sqrt()).expect("finite component"))
        .collect();
    let cdf = |x: f64| comps.iter().map(|c| c.cdf(x)).sum::<f64>() / comps.len() as f64;
    let spread = variances.iter().cloned().fold(0.0, f64::max).sqrt();
    let mut lo = means.iter().cloned().fold(f64::INFINITY, f64::min) - 40.0 * spread;
    let mut hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 40.0 * spread;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}
