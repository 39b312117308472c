//! Mini-batch SGD with heavy-ball momentum, and the constant-learning-rate
//! averaging phase that collects the trajectory deviation matrix.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{check_len, Error, Result};
use crate::net::{self, Architecture, ParamVector};

/// A differentiable loss averaged over mini-batches of examples.
pub trait Objective: Sync {
    /// Length of the flat parameter vector.
    fn num_params(&self) -> usize;

    /// The leading coordinates that are network weights: they receive weight
    /// decay and make up the stored trajectory deviations. Trailing
    /// coordinates (e.g. the global noise) are trained but not decayed.
    fn num_weights(&self) -> usize {
        self.num_params()
    }

    fn num_examples(&self) -> usize;

    /// Mean loss over `batch`; its gradient overwrites `grad`.
    fn loss_and_grad(&self, params: &[f64], batch: &[usize], grad: &mut [f64]) -> Result<f64>;

    /// Mean loss over `batch`.
    fn loss(&self, params: &[f64], batch: &[usize]) -> Result<f64> {
        let mut scratch = vec![0.0; self.num_params()];
        self.loss_and_grad(params, batch, &mut scratch)
    }
}

/// Negative mean log-likelihood of a network over a dataset, parameterized by
/// `[weights, raw_global_noise]`.
pub struct NetObjective<'a> {
    pub arch: &'a Architecture,
    pub data: &'a Dataset,
}

impl<'a> NetObjective<'a> {
    pub fn new(arch: &'a Architecture, data: &'a Dataset) -> Self {
        Self { arch, data }
    }
}

impl Objective for NetObjective<'_> {
    fn num_params(&self) -> usize {
        self.arch.num_weights() + 1
    }

    fn num_weights(&self) -> usize {
        self.arch.num_weights()
    }

    fn num_examples(&self) -> usize {
        self.data.len()
    }

    fn loss_and_grad(&self, params: &[f64], batch: &[usize], grad: &mut [f64]) -> Result<f64> {
        check_len("flat parameters", self.num_params(), params.len())?;
        grad.fill(0.0);
        let p = ParamVector::from_flat(params);
        let ll = net::accumulate_grad(self.arch, &p, self.data, Some(batch), grad)?;
        let scale = -1.0 / batch.len() as f64;
        for g in grad.iter_mut() {
            *g *= scale;
        }
        Ok(ll * scale)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub num_steps: usize,
    #[serde(default = "default_one")]
    pub capture_frequency: usize,
    #[serde(default = "default_max_cols")]
    pub max_deviation_cols: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_one() -> usize {
    1
}
fn default_max_cols() -> usize {
    20
}

impl TrainConfig {
    pub fn validate(&self, num_examples: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.capture_frequency == 0 {
            return bad("capture_frequency must be at least 1");
        }
        if self.max_deviation_cols == 0 {
            return bad("max_deviation_cols must be at least 1");
        }
        if self.batch_size == 0 || self.batch_size > num_examples {
            return Err(Error::InvalidConfig(format!(
                "batch_size must lie in 1..={num_examples}, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

/// Sequential passes over a freshly shuffled permutation each epoch.
pub(crate) struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: n,
            batch_size,
        }
    }

    pub(crate) fn next_batch(&mut self) -> &[usize] {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        let end = (start + self.batch_size).min(self.order.len());
        self.cursor = end;
        &self.order[start..end]
    }
}

/// Heavy-ball SGD: `v <- m v + g + wd w`, `w <- w - lr v`.
pub(crate) struct Sgd {
    velocity: Vec<f64>,
    grad: Vec<f64>,
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
    decayed: usize,
}

impl Sgd {
    pub(crate) fn new(
        dim: usize,
        decayed: usize,
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Self {
        Self {
            velocity: vec![0.0; dim],
            grad: vec![0.0; dim],
            learning_rate,
            momentum,
            weight_decay,
            decayed,
        }
    }

    /// One update; returns the regularized mini-batch loss before the step.
    pub(crate) fn step<O: Objective + ?Sized>(
        &mut self,
        objective: &O,
        params: &mut [f64],
        batch: &[usize],
        step: usize,
    ) -> Result<f64> {
        let data_loss = objective.loss_and_grad(params, batch, &mut self.grad)?;
        let mut penalty = 0.0;
        if self.weight_decay > 0.0 {
            for (g, w) in self.grad[..self.decayed]
                .iter_mut()
                .zip(&params[..self.decayed])
            {
                *g += self.weight_decay * w;
                penalty += w * w;
            }
        }
        let loss = data_loss + 0.5 * self.weight_decay * penalty;
        if !loss.is_finite() || self.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        for ((w, v), g) in params.iter_mut().zip(&mut self.velocity).zip(&self.grad) {
            *v = self.momentum * *v + g;
            *w -= self.learning_rate * *v;
        }
        Ok(loss)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Vec<f64>,
    pub trace: Vec<TraceRecord>,
}

/// Runs `config.num_steps` SGD updates from `params0`.
pub fn train_sgd<O: Objective + ?Sized>(
    objective: &O,
    params0: &[f64],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate(objective.num_examples())?;
    check_len("initial parameters", objective.num_params(), params0.len())?;
    let mut params = params0.to_vec();
    let mut sgd = Sgd::new(
        params.len(),
        objective.num_weights(),
        config.learning_rate,
        config.momentum,
        config.weight_decay,
    );
    let mut batches = BatchSampler::new(objective.num_examples(), config.batch_size, config.seed);
    let mut trace = Vec::with_capacity(config.num_steps);
    for step in 1..=config.num_steps {
        let loss = sgd.step(objective, &mut params, batches.next_batch(), step)?;
        trace.push(TraceRecord {
            step,
            loss,
            learning_rate: config.learning_rate,
        });
    }
    Ok(TrainOutcome { params, trace })
}

/// Trains a network; see [`train_sgd`].
pub fn train_network(
    arch: &Architecture,
    params0: &ParamVector,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(ParamVector, Vec<TraceRecord>)> {
    params0.check(arch)?;
    let objective = NetObjective::new(arch, data);
    let out = train_sgd(&objective, &params0.to_flat(), config)?;
    Ok((ParamVector::from_flat(&out.params), out.trace))
}

/// The most recent (at most `max_columns`) deviations of captured iterates
/// from the running mean, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviationBuffer {
    columns: VecDeque<Vec<f64>>,
    max_columns: usize,
    n_captured: usize,
}

impl DeviationBuffer {
    pub fn new(max_columns: usize) -> Self {
        assert!(
            max_columns >= 1,
            "buffer needs room for at least one column"
        );
        Self {
            columns: VecDeque::with_capacity(max_columns),
            max_columns,
            n_captured: 0,
        }
    }

    /// Rebuilds a buffer from stored columns (oldest first).
    pub fn from_columns(
        columns: Vec<Vec<f64>>,
        max_columns: usize,
        n_captured: usize,
    ) -> Result<Self> {
        if columns.len() > max_columns || max_columns == 0 {
            return Err(Error::InvalidConfig(format!(
                "{} columns exceed buffer capacity {max_columns}",
                columns.len()
            )));
        }
        if let Some(first) = columns.first() {
            for c in &columns {
                check_len("deviation column", first.len(), c.len())?;
            }
        }
        Ok(Self {
            columns: columns.into(),
            max_columns,
            n_captured,
        })
    }

    pub fn push(&mut self, column: Vec<f64>) {
        if self.columns.len() == self.max_columns {
            self.columns.pop_front();
        }
        self.columns.push_back(column);
        self.n_captured += 1;
    }

    pub fn columns(&self) -> impl ExactSizeIterator<Item = &Vec<f64>> {
        self.columns.iter()
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn max_columns(&self) -> usize {
        self.max_columns
    }

    pub fn n_captured(&self) -> usize {
        self.n_captured
    }

    /// Length of each column (`d`), or `None` if empty.
    pub fn dim(&self) -> Option<usize> {
        self.columns.front().map(Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }
}

/// Running mean over the starting point and every captured iterate.
#[derive(Clone, Debug)]
pub struct SwaAverage {
    mean: Vec<f64>,
    n_models: usize,
}

impl SwaAverage {
    /// The mean starts at the pretrained weights, which count as the first model.
    pub fn new(start: &[f64]) -> Self {
        Self {
            mean: start.to_vec(),
            n_models: 1,
        }
    }

    /// `mean <- (n mean + w) / (n + 1)`.
    pub fn update(&mut self, iterate: &[f64]) {
        let n = self.n_models as f64;
        for (m, w) in self.mean.iter_mut().zip(iterate) {
            *m = (n * *m + w) / (n + 1.0);
        }
        self.n_models += 1;
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }
}

#[derive(Clone, Debug)]
pub struct SwaOutcome {
    pub mean: Vec<f64>,
    pub buffer: DeviationBuffer,
    pub pretrained_start: Vec<f64>,
    pub final_iterate: Vec<f64>,
    pub trace: Vec<TraceRecord>,
}

/// Constant-learning-rate SGD from `pretrained`. Every `capture_frequency`
/// steps the running mean is updated with the current iterate, then the
/// deviation of that iterate from the updated mean (weight coordinates only)
/// is appended to the buffer. `on_capture` sees each captured iterate.
pub fn run_swa_with<O, F>(
    objective: &O,
    pretrained: &[f64],
    config: &TrainConfig,
    mut on_capture: F,
) -> Result<SwaOutcome>
where
    O: Objective + ?Sized,
    F: FnMut(&[f64]),
{
    config.validate(objective.num_examples())?;
    check_len(
        "pretrained parameters",
        objective.num_params(),
        pretrained.len(),
    )?;
    let d = objective.num_weights();
    let mut params = pretrained.to_vec();
    let mut avg = SwaAverage::new(pretrained);
    let mut buffer = DeviationBuffer::new(config.max_deviation_cols);
    let mut sgd = Sgd::new(
        params.len(),
        d,
        config.learning_rate,
        config.momentum,
        config.weight_decay,
    );
    let mut batches = BatchSampler::new(objective.num_examples(), config.batch_size, config.seed);
    let mut trace = Vec::with_capacity(config.num_steps);
    for step in 1..=config.num_steps {
        let loss = sgd.step(objective, &mut params, batches.next_batch(), step)?;
        trace.push(TraceRecord {
            step,
            loss,
            learning_rate: config.learning_rate,
        });
        if step % config.capture_frequency == 0 {
            avg.update(&params);
            on_capture(&params);
            let deviation = params[..d]
                .iter()
                .zip(&avg.mean()[..d])
                .map(|(w, m)| w - m)
                .collect();
            buffer.push(deviation);
        }
    }
    Ok(SwaOutcome {
        mean: avg.mean,
        buffer,
        pretrained_start: pretrained.to_vec(),
        final_iterate: params,
        trace,
    })
}

pub fn run_swa<O: Objective + ?Sized>(
    objective: &O,
    pretrained: &[f64],
    config: &TrainConfig,
) -> Result<SwaOutcome> {
    run_swa_with(objective, pretrained, config, |_| {})
}

#[derive(Clone, Debug)]
pub struct SwaResult {
    pub w_swa: ParamVector,
    pub buffer: DeviationBuffer,
    pub pretrained_start: ParamVector,
    pub trace: Vec<TraceRecord>,
}

/// Network form of [`run_swa`].
pub fn run_network_swa(
    arch: &Architecture,
    pretrained: &ParamVector,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<SwaResult> {
    pretrained.check(arch)?;
    let objective = NetObjective::new(arch, data);
    let out = run_swa(&objective, &pretrained.to_flat(), config)?;
    Ok(SwaResult {
        w_swa: ParamVector::from_flat(&out.mean),
        buffer: out.buffer,
        pretrained_start: pretrained.clone(),
        trace: out.trace,
    })
}
