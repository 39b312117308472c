//! Tempered log-posterior over subspace coordinates:
//! `log p_T(z | D) = (1/T) log p(D | shift + P z) + log N(z | 0, sigma^2 I) + const`.

use crate::dataset::Dataset;
use crate::error::{check_len, Error, Result};
use crate::net::{self, Architecture};
use crate::subspace::Subspace;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Rows per partial sum when accumulating the full-batch likelihood.
pub const LIKELIHOOD_CHUNK: usize = 512;

/// A Gaussian-prior target whose likelihood term is already tempered.
///
/// Samplers and variational fits only see this interface, which lets them
/// run against closed-form targets as well as network posteriors.
pub trait TemperedTarget: Sync {
    fn dim(&self) -> usize;

    /// Standard deviation of the isotropic Gaussian prior.
    fn prior_std(&self) -> f64;

    /// `(1/T) log p(D | z)`.
    fn tempered_log_likelihood(&self, z: &[f64]) -> Result<f64>;

    /// Value and gradient of `(1/T) log p(D | z)`.
    fn grad_tempered_log_likelihood(&self, z: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn log_prior(&self, z: &[f64]) -> f64 {
        isotropic_log_density(z, self.prior_std())
    }
}

/// `log N(z | 0, std^2 I)` with its normalizing constant.
pub fn isotropic_log_density(z: &[f64], std: f64) -> f64 {
    let k = z.len() as f64;
    let sq: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * k * LN_2PI - k * std.ln() - 0.5 * sq / (std * std)
}

#[derive(Clone, Copy, Debug)]
pub struct SubspacePosterior<'a> {
    pub subspace: &'a Subspace,
    pub arch: &'a Architecture,
    pub data: &'a Dataset,
    temperature: f64,
    prior_std: f64,
}

impl<'a> SubspacePosterior<'a> {
    /// `temperature` may be `+inf`, which drops the likelihood entirely.
    pub fn new(
        subspace: &'a Subspace,
        arch: &'a Architecture,
        data: &'a Dataset,
        temperature: f64,
        prior_std: f64,
    ) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if !(prior_std > 0.0) || !prior_std.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "prior_std must be positive, got {prior_std}"
            )));
        }
        check_len(
            "subspace ambient dimension",
            arch.num_weights(),
            subspace.ambient_dim(),
        )?;
        check_len("data input dimension", arch.input_dim, data.input_dim())?;
        Ok(Self {
            subspace,
            arch,
            data,
            temperature,
            prior_std,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        self.temperature = temperature;
        Ok(self)
    }

    /// Weight applied to the log-likelihood, `1/T`.
    pub fn likelihood_weight(&self) -> f64 {
        1.0 / self.temperature
    }

    /// Untempered full-batch `log p(D | z)`, summed chunk by chunk.
    pub fn log_likelihood(&self, z: &[f64]) -> Result<f64> {
        let w = self.subspace.embed(z)?;
        let n = self.data.len();
        let mut total = 0.0;
        let mut idx = Vec::with_capacity(LIKELIHOOD_CHUNK.min(n));
        for start in (0..n).step_by(LIKELIHOOD_CHUNK) {
            idx.clear();
            idx.extend(start..(start + LIKELIHOOD_CHUNK).min(n));
            total += net::log_likelihood(self.arch, &w, self.data, Some(&idx))?;
        }
        Ok(total)
    }

    /// Untempered log-likelihood and its gradient in `z`.
    pub fn grad_log_likelihood(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let w = self.subspace.embed(z)?;
        let (ll, g) = net::grad_log_likelihood(self.arch, &w, self.data, None)?;
        Ok((ll, self.subspace.project_gradient(&g)?))
    }

    pub fn log_prior(&self, z: &[f64]) -> Result<f64> {
        check_len("subspace coordinates", self.subspace.dim(), z.len())?;
        Ok(isotropic_log_density(z, self.prior_std))
    }

    /// Unnormalized tempered log-posterior.
    pub fn log_posterior(&self, z: &[f64]) -> Result<f64> {
        let prior = self.log_prior(z)?;
        let weight = self.likelihood_weight();
        if weight == 0.0 {
            return Ok(prior);
        }
        Ok(weight * self.log_likelihood(z)? + prior)
    }

    pub fn grad_log_posterior(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len("subspace coordinates", self.subspace.dim(), z.len())?;
        let inv_var = 1.0 / (self.prior_std * self.prior_std);
        let weight = self.likelihood_weight();
        let mut grad: Vec<f64> = z.iter().map(|v| -v * inv_var).collect();
        if weight > 0.0 {
            let (_, g) = self.grad_log_likelihood(z)?;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += weight * b;
            }
        }
        Ok(grad)
    }
}

impl TemperedTarget for SubspacePosterior<'_> {
    fn dim(&self) -> usize {
        self.subspace.dim()
    }

    fn prior_std(&self) -> f64 {
        self.prior_std
    }

    fn tempered_log_likelihood(&self, z: &[f64]) -> Result<f64> {
        let weight = self.likelihood_weight();
        if weight == 0.0 {
            check_len("subspace coordinates", self.subspace.dim(), z.len())?;
            return Ok(0.0);
        }
        Ok(weight * self.log_likelihood(z)?)
    }

    fn grad_tempered_log_likelihood(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let weight = self.likelihood_weight();
        if weight == 0.0 {
            check_len("subspace coordinates", self.subspace.dim(), z.len())?;
            return Ok((0.0, vec![0.0; z.len()]));
        }
        let (ll, mut g) = self.grad_log_likelihood(z)?;
        for v in &mut g {
            *v *= weight;
        }
        Ok((weight * ll, g))
    }
}
