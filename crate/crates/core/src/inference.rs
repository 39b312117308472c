//! Posterior approximation in subspace coordinates: elliptical slice sampling
//! and a fully-factorized Gaussian variational family.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::net::{sigmoid, softplus, softplus_inv};
use crate::posterior::TemperedTarget;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub num_samples: usize,
    #[serde(default)]
    pub burn_in: usize,
    #[serde(default = "one")]
    pub thinning: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_shrink")]
    pub max_shrink_iters: usize,
}

fn one() -> usize {
    1
}
fn default_max_shrink() -> usize {
    1000
}

impl ChainConfig {
    pub fn new(num_samples: usize, burn_in: usize, thinning: usize, seed: u64) -> Self {
        Self {
            num_samples,
            burn_in,
            thinning,
            seed,
            max_shrink_iters: default_max_shrink(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::InvalidConfig(
                "num_samples must be at least 1".into(),
            ));
        }
        if self.thinning == 0 {
            return Err(Error::InvalidConfig("thinning must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Ess,
    Vi,
}

/// Draws of subspace coordinates, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Vec<f64>>,
    /// Tempered log-posterior of each row; NaN until scored for VI draws.
    pub log_posteriors: Vec<f64>,
    pub provenance: Provenance,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    /// Fills `log_posteriors` from `target`.
    pub fn rescore<T: TemperedTarget + ?Sized>(&mut self, target: &T) -> Result<()> {
        self.log_posteriors = self
            .samples
            .iter()
            .map(|z| Ok(target.tempered_log_likelihood(z)? + target.log_prior(z)))
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// Per-coordinate sample mean.
    pub fn mean(&self) -> Vec<f64> {
        let k = self.dim();
        let mut m = vec![0.0; k];
        for z in &self.samples {
            for (a, b) in m.iter_mut().zip(z) {
                *a += b;
            }
        }
        m.iter().map(|v| v / self.len() as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EssUpdate {
    pub z: Vec<f64>,
    /// Log-likelihood at the accepted state.
    pub log_likelihood: f64,
    /// Rejected proposals before acceptance.
    pub n_shrinks: usize,
}

/// One elliptical slice sampling transition for `N(0, prior_std^2 I) x exp(loglik)`.
///
/// `current_loglik` must equal `loglik(z)`.
pub fn ess_step<F, R>(
    z: &[f64],
    current_loglik: f64,
    mut loglik: F,
    prior_std: f64,
    rng: &mut R,
    max_shrink_iters: usize,
) -> Result<EssUpdate>
where
    F: FnMut(&[f64]) -> Result<f64>,
    R: Rng + ?Sized,
{
    let nu: Vec<f64> = (0..z.len())
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut *rng);
            prior_std * e
        })
        .collect();
    let u: f64 = rng.random();
    let threshold = current_loglik + u.ln();
    let mut theta: f64 = rng.random_range(0.0..2.0 * PI);
    let (mut lo, mut hi) = (theta - 2.0 * PI, theta);
    let mut proposal = vec![0.0; z.len()];
    let mut n_shrinks = 0;
    loop {
        let (s, c) = theta.sin_cos();
        for ((p, zi), ni) in proposal.iter_mut().zip(z).zip(&nu) {
            *p = zi * c + ni * s;
        }
        let ll = loglik(&proposal)?;
        if ll > threshold {
            return Ok(EssUpdate {
                z: proposal,
                log_likelihood: ll,
                n_shrinks,
            });
        }
        n_shrinks += 1;
        if n_shrinks > max_shrink_iters {
            return Err(Error::ShrinkLimitExceeded {
                max_iters: max_shrink_iters,
            });
        }
        if theta < 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        theta = rng.random_range(lo..hi);
    }
}

/// Elliptical slice sampling chain on a tempered target.
pub fn run_ess<T: TemperedTarget + ?Sized>(
    target: &T,
    z0: &[f64],
    config: &ChainConfig,
) -> Result<SampleSet> {
    config.validate()?;
    check_len("initial state", target.dim(), z0.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut z = z0.to_vec();
    let mut ll = target.tempered_log_likelihood(&z)?;
    let total = config.burn_in + config.num_samples * config.thinning;
    let mut samples = Vec::with_capacity(config.num_samples);
    let mut log_posteriors = Vec::with_capacity(config.num_samples);
    for it in 1..=total {
        let step = ess_step(
            &z,
            ll,
            |x| target.tempered_log_likelihood(x),
            target.prior_std(),
            &mut rng,
            config.max_shrink_iters,
        )?;
        z = step.z;
        ll = step.log_likelihood;
        if it > config.burn_in && (it - config.burn_in).is_multiple_of(config.thinning) {
            log_posteriors.push(ll + target.log_prior(&z));
            samples.push(z.clone());
        }
    }
    Ok(SampleSet {
        samples,
        log_posteriors,
        provenance: Provenance::Ess,
    })
}

/// Fully-factorized Gaussian `q(z) = N(mean, diag(softplus(raw_std))^2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VIPosterior {
    pub mean: Vec<f64>,
    pub raw_std: Vec<f64>,
}

impl VIPosterior {
    /// Mean zero, std `0.1 * prior_std`.
    pub fn initial(dim: usize, prior_std: f64) -> Self {
        Self {
            mean: vec![0.0; dim],
            raw_std: vec![softplus_inv(0.1 * prior_std); dim],
        }
    }

    pub fn std(&self) -> Vec<f64> {
        self.raw_std.iter().map(|&r| softplus(r)).collect()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `KL(q || N(0, prior_std^2 I))` in closed form.
pub fn kl_to_prior(q: &VIPosterior, prior_std: f64) -> f64 {
    let pv = prior_std * prior_std;
    q.mean
        .iter()
        .zip(q.std())
        .map(|(m, s)| (prior_std / s).ln() + (s * s + m * m) / (2.0 * pv) - 0.5)
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VIConfig {
    #[serde(default = "default_vi_steps")]
    pub steps: usize,
    #[serde(default = "default_vi_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_vi_steps() -> usize {
    5000
}
fn default_vi_lr() -> f64 {
    0.01
}
fn default_mc() -> usize {
    4
}

impl Default for VIConfig {
    fn default() -> Self {
        Self {
            steps: default_vi_steps(),
            learning_rate: default_vi_lr(),
            mc_samples: default_mc(),
            seed: 0,
        }
    }
}

/// Monte Carlo ELBO at fixed standard-normal draws, with its exact gradient
/// through the reparameterization `z = mean + std * eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    pub grad_mean: Vec<f64>,
    pub grad_raw_std: Vec<f64>,
}

pub fn elbo_estimate<T: TemperedTarget + ?Sized>(
    target: &T,
    q: &VIPosterior,
    draws: &[Vec<f64>],
) -> Result<ElboEstimate> {
    let k = q.dim();
    check_len("variational dimension", target.dim(), k)?;
    let std = q.std();
    let prior_var = target.prior_std().powi(2);
    let mut value = 0.0;
    let mut grad_mean = vec![0.0; k];
    let mut grad_std = vec![0.0; k];
    let scale = 1.0 / draws.len() as f64;
    let mut z = vec![0.0; k];
    for eps in draws {
        check_len("noise draw", k, eps.len())?;
        for i in 0..k {
            z[i] = q.mean[i] + std[i] * eps[i];
        }
        let (ll, g) = target.grad_tempered_log_likelihood(&z)?;
        value += scale * ll;
        for i in 0..k {
            grad_mean[i] += scale * g[i];
            grad_std[i] += scale * g[i] * eps[i];
        }
    }
    value -= kl_to_prior(q, target.prior_std());
    let grad_raw_std = (0..k)
        .map(|i| {
            grad_mean[i] -= q.mean[i] / prior_var;
            let d_kl_d_std = -1.0 / std[i] + std[i] / prior_var;
            (grad_std[i] - d_kl_d_std) * sigmoid(q.raw_std[i])
        })
        .collect();
    Ok(ElboEstimate {
        value,
        grad_mean,
        grad_raw_std,
    })
}

/// Per-coordinate adaptive moment estimates (decays 0.9 / 0.999).
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(dim: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            lr,
        }
    }

    /// Ascent step on `params` along `grad`.
    fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] += self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Clone, Debug)]
pub struct VIFit {
    pub posterior: VIPosterior,
    /// Per-step ELBO estimates.
    pub elbo_trace: Vec<f64>,
}

/// Stochastic-gradient ascent on the ELBO of a fully-factorized Gaussian.
pub fn fit_vi<T: TemperedTarget + ?Sized>(target: &T, config: &VIConfig) -> Result<VIFit> {
    if config.mc_samples == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::InvalidConfig(
            "VI needs mc_samples >= 1 and a positive learning rate".into(),
        ));
    }
    let k = target.dim();
    let mut q = VIPosterior::initial(k, target.prior_std());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(2 * k, config.learning_rate);
    let mut params = vec![0.0; 2 * k];
    let mut grad = vec![0.0; 2 * k];
    let mut draws = vec![vec![0.0; k]; config.mc_samples];
    let mut elbo_trace = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        for eps in draws.iter_mut() {
            for e in eps.iter_mut() {
                *e = StandardNormal.sample(&mut rng);
            }
        }
        let est = elbo_estimate(target, &q, &draws)?;
        if !est.value.is_finite() {
            return Err(Error::NonFiniteElbo { step });
        }
        elbo_trace.push(est.value);
        params[..k].copy_from_slice(&q.mean);
        params[k..].copy_from_slice(&q.raw_std);
        grad[..k].copy_from_slice(&est.grad_mean);
        grad[k..].copy_from_slice(&est.grad_raw_std);
        adam.ascend(&mut params, &grad);
        q.mean.copy_from_slice(&params[..k]);
        q.raw_std.copy_from_slice(&params[k..]);
    }
    Ok(VIFit {
        posterior: q,
        elbo_trace,
    })
}

/// `j` independent draws from `q`.
pub fn sample_vi(q: &VIPosterior, j: usize, seed: u64) -> SampleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = q.std();
    let samples = (0..j)
        .map(|_| {
            q.mean
                .iter()
                .zip(&std)
                .map(|(m, s)| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    m + s * e
                })
                .collect()
        })
        .collect();
    SampleSet {
        samples,
        log_posteriors: vec![f64::NAN; j],
        provenance: Provenance::Vi,
    }
}
