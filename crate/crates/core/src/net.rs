//! Fully-connected networks over a flat weight vector.
//!
//! Layer `l` maps `fan_in -> fan_out` and owns a contiguous block of the flat
//! vector: the `fan_out x fan_in` weight matrix (row-major) followed by
//! `fan_out` biases. The Gaussian head emits `(mean, raw_scale)` and the
//! predictive variance is `softplus(raw_scale)^2 + softplus(raw_global_noise)^2`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Targets};
use crate::error::{check_len, Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum Head {
    GaussianHeteroscedastic,
    Categorical { num_classes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub head: Head,
    pub activation: Activation,
    /// Feed `[x, x^2]` instead of `x`.
    #[serde(default)]
    pub augment_square_input: bool,
}

#[derive(Clone, Copy, Debug)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl LayerShape {
    fn bias_offset(&self) -> usize {
        self.offset + self.fan_in * self.fan_out
    }
}

impl Architecture {
    pub fn new(
        input_dim: usize,
        hidden_sizes: Vec<usize>,
        head: Head,
        activation: Activation,
        augment_square_input: bool,
    ) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_sizes,
            head,
            activation,
            augment_square_input,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::InvalidConfig(
                "hidden layer sizes must be positive".into(),
            ));
        }
        if let Head::Categorical { num_classes } = self.head {
            if num_classes < 2 {
                return Err(Error::InvalidConfig(
                    "categorical head needs at least 2 classes".into(),
                ));
            }
        }
        Ok(())
    }

    /// Width of the first layer's input after optional `x^2` augmentation.
    pub fn network_input_dim(&self) -> usize {
        if self.augment_square_input {
            2 * self.input_dim
        } else {
            self.input_dim
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            Head::GaussianHeteroscedastic => 2,
            Head::Categorical { num_classes } => num_classes,
        }
    }

    fn layers(&self) -> Vec<LayerShape> {
        let mut dims = Vec::with_capacity(self.hidden_sizes.len() + 2);
        dims.push(self.network_input_dim());
        dims.extend_from_slice(&self.hidden_sizes);
        dims.push(self.output_dim());
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let shape = LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += w[0] * w[1] + w[1];
                shape
            })
            .collect()
    }

    /// Total number of network weights `d` (biases included, global noise excluded).
    pub fn num_weights(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.fan_in * l.fan_out + l.fan_out)
            .sum()
    }

    pub fn is_regression(&self) -> bool {
        matches!(self.head, Head::GaussianHeteroscedastic)
    }
}

/// Flat network weights plus the raw (pre-softplus) global noise scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub weights: Vec<f64>,
    pub raw_global_noise: f64,
}

impl ParamVector {
    pub fn zeros(d: usize) -> Self {
        Self {
            weights: vec![0.0; d],
            raw_global_noise: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `s = softplus(raw_global_noise)`.
    pub fn global_noise_scale(&self) -> f64 {
        softplus(self.raw_global_noise)
    }

    /// Weights followed by the raw noise, as optimized by the trainers.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.weights.len() + 1);
        flat.extend_from_slice(&self.weights);
        flat.push(self.raw_global_noise);
        flat
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        let (raw, weights) = flat.split_last().expect("flat parameter vector is empty");
        Self {
            weights: weights.to_vec(),
            raw_global_noise: *raw,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.raw_global_noise.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }

    pub fn check(&self, arch: &Architecture) -> Result<()> {
        check_len("parameter vector", arch.num_weights(), self.weights.len())?;
        if !self.is_finite() {
            return Err(Error::InvalidConfig(
                "parameter vector has non-finite entries".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NetOutput {
    Gaussian { mean: f64, variance: f64 },
    Categorical { logits: Vec<f64> },
}

impl NetOutput {
    /// Softmax probabilities for a categorical output.
    pub fn probabilities(&self) -> Option<Vec<f64>> {
        match self {
            NetOutput::Categorical { logits } => {
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                Some(exps.into_iter().map(|e| e / z).collect())
            }
            NetOutput::Gaussian { .. } => None,
        }
    }
}

/// Uniform Glorot initialization, zero biases, global noise at `s = 1`.
pub fn init_weights(arch: &Architecture, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = vec![0.0; arch.num_weights()];
    for layer in arch.layers() {
        let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        for w in &mut weights[layer.offset..layer.bias_offset()] {
            *w = rng.random_range(-limit..limit);
        }
    }
    ParamVector {
        weights,
        raw_global_noise: unit_noise_raw(),
    }
}

/// A raw value whose softplus is exactly 1.0 in floating point.
fn unit_noise_raw() -> f64 {
    let mut r = softplus_inv(1.0);
    for _ in 0..16 {
        let s = softplus(r);
        if s == 1.0 {
            break;
        }
        r = if s < 1.0 { r.next_up() } else { r.next_down() };
    }
    r
}

/// Reusable activations for one example.
struct Scratch {
    /// `pre[l]` is the pre-activation of layer `l`.
    pre: Vec<Vec<f64>>,
    /// `act[0]` is the (augmented) input; `act[l + 1]` feeds layer `l + 1`.
    act: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Scratch {
    fn new(layers: &[LayerShape]) -> Self {
        let mut act = vec![vec![0.0; layers[0].fan_in]];
        act.extend(layers.iter().map(|l| vec![0.0; l.fan_out]));
        let widest = layers
            .iter()
            .map(|l| l.fan_out.max(l.fan_in))
            .max()
            .unwrap_or(0);
        Self {
            pre: layers.iter().map(|l| vec![0.0; l.fan_out]).collect(),
            act,
            delta: Vec::with_capacity(widest),
            delta_prev: Vec::with_capacity(widest),
        }
    }
}

/// Compiled view of an architecture used by the hot loops.
struct Network<'a> {
    arch: &'a Architecture,
    layers: Vec<LayerShape>,
}

impl<'a> Network<'a> {
    fn new(arch: &'a Architecture) -> Self {
        Self {
            arch,
            layers: arch.layers(),
        }
    }

    fn forward_into(&self, weights: &[f64], x: &[f64], s: &mut Scratch) {
        let input = &mut s.act[0];
        input[..x.len()].copy_from_slice(x);
        if self.arch.augment_square_input {
            for (j, v) in x.iter().enumerate() {
                input[x.len() + j] = v * v;
            }
        }
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = &weights[layer.offset..layer.bias_offset()];
            let b = &weights[layer.bias_offset()..layer.bias_offset() + layer.fan_out];
            let (inp, out) = s.act.split_at_mut(l + 1);
            let inp = &inp[l];
            let pre = &mut s.pre[l];
            for o in 0..layer.fan_out {
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                let mut acc = b[o];
                for (wi, xi) in row.iter().zip(inp.iter()) {
                    acc += wi * xi;
                }
                pre[o] = acc;
            }
            let out = &mut out[0];
            if l == last {
                out.copy_from_slice(pre);
            } else {
                for (a, p) in out.iter_mut().zip(pre.iter()) {
                    *a = self.arch.activation.apply(*p);
                }
            }
        }
    }

    fn output(&self, s: &Scratch, raw_noise: f64) -> NetOutput {
        let out = s.act.last().expect("network has an output layer");
        match self.arch.head {
            Head::GaussianHeteroscedastic => {
                let sw = softplus(out[1]);
                let sg = softplus(raw_noise);
                NetOutput::Gaussian {
                    mean: out[0],
                    variance: sw * sw + sg * sg,
                }
            }
            Head::Categorical { .. } => NetOutput::Categorical {
                logits: out.clone(),
            },
        }
    }

    /// Log-density of one example; when `grad` is given, its gradient with
    /// respect to the flat `[weights, raw_noise]` vector is accumulated there.
    fn point_log_lik(
        &self,
        params: &ParamVector,
        x: &[f64],
        target: TargetRef,
        s: &mut Scratch,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        self.forward_into(&params.weights, x, s);
        let out = s.act.last().expect("network has an output layer");
        s.delta.clear();
        let mut noise_grad = 0.0;
        let ll = match (self.arch.head, target) {
            (Head::GaussianHeteroscedastic, TargetRef::Real(y)) => {
                let (mu, raw_scale) = (out[0], out[1]);
                let sw = softplus(raw_scale);
                let sg = softplus(params.raw_global_noise);
                let var = sw * sw + sg * sg;
                let r = y - mu;
                let ll = -HALF_LN_2PI - 0.5 * var.ln() - 0.5 * r * r / var;
                if grad.is_some() {
                    let d_var = -0.5 / var + 0.5 * r * r / (var * var);
                    s.delta.push(r / var);
                    s.delta.push(d_var * 2.0 * sw * sigmoid(raw_scale));
                    noise_grad = d_var * 2.0 * sg * sigmoid(params.raw_global_noise);
                }
                ll
            }
            (Head::Categorical { .. }, TargetRef::Class(c)) => {
                let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = out.iter().map(|l| (l - max).exp()).sum();
                let lse = max + sum_exp.ln();
                if grad.is_some() {
                    s.delta.extend(out.iter().enumerate().map(|(k, l)| {
                        let p = (l - lse).exp();
                        if k == c {
                            1.0 - p
                        } else {
                            -p
                        }
                    }));
                }
                out[c] - lse
            }
            _ => unreachable!("target kind checked against head before evaluation"),
        };
        if let Some(g) = grad {
            self.backward(&params.weights, s, g);
            *g.last_mut().expect("gradient includes the noise slot") += noise_grad;
        }
        ll
    }

    fn backward(&self, weights: &[f64], s: &mut Scratch, grad: &mut [f64]) {
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let inp = &s.act[l];
            let bias = layer.bias_offset();
            for o in 0..layer.fan_out {
                let d = s.delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad
                    [layer.offset + o * layer.fan_in..layer.offset + (o + 1) * layer.fan_in];
                for (g, a) in row.iter_mut().zip(inp.iter()) {
                    *g += d * a;
                }
                grad[bias + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = &weights[layer.offset..bias];
            s.delta_prev.clear();
            s.delta_prev.resize(layer.fan_in, 0.0);
            for o in 0..layer.fan_out {
                let d = s.delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (dp, wi) in s.delta_prev.iter_mut().zip(row) {
                    *dp += d * wi;
                }
            }
            let pre = &s.pre[l - 1];
            for (dp, p) in s.delta_prev.iter_mut().zip(pre) {
                *dp *= self.arch.activation.derivative(*p);
            }
            std::mem::swap(&mut s.delta, &mut s.delta_prev);
        }
    }
}

#[derive(Clone, Copy)]
enum TargetRef {
    Real(f64),
    Class(usize),
}

fn check_data(arch: &Architecture, data: &Dataset) -> Result<()> {
    check_len("input dimension", arch.input_dim, data.input_dim())?;
    match (arch.head, data.targets()) {
        (Head::GaussianHeteroscedastic, Targets::Real(_)) => Ok(()),
        (Head::Categorical { num_classes }, Targets::Class(c)) => {
            if let Some(&bad) = c.iter().find(|&&k| k >= num_classes) {
                Err(Error::InvalidConfig(format!(
                    "class label {bad} out of range for {num_classes} classes"
                )))
            } else {
                Ok(())
            }
        }
        _ => Err(Error::InvalidConfig(
            "target kind does not match network head".into(),
        )),
    }
}

/// Indices in ascending order, validated against `n`.
fn ordered_subset(subset: Option<&[usize]>, n: usize) -> Result<Vec<usize>> {
    match subset {
        None => Ok((0..n).collect()),
        Some(idx) => {
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::IndexOutOfRange { index: bad, len: n });
            }
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            Ok(idx)
        }
    }
}

fn target_at(data: &Dataset, i: usize) -> TargetRef {
    match data.targets() {
        Targets::Real(t) => TargetRef::Real(t[i]),
        Targets::Class(t) => TargetRef::Class(t[i]),
    }
}

pub fn forward(arch: &Architecture, params: &ParamVector, x: &[f64]) -> Result<NetOutput> {
    check_len("input vector", arch.input_dim, x.len())?;
    check_len("parameter vector", arch.num_weights(), params.weights.len())?;
    let net = Network::new(arch);
    let mut scratch = Scratch::new(&net.layers);
    net.forward_into(&params.weights, x, &mut scratch);
    Ok(net.output(&scratch, params.raw_global_noise))
}

/// Forward pass over every row of a row-major input matrix.
pub fn forward_batch(
    arch: &Architecture,
    params: &ParamVector,
    inputs: &[f64],
) -> Result<Vec<NetOutput>> {
    check_len("parameter vector", arch.num_weights(), params.weights.len())?;
    if !inputs.len().is_multiple_of(arch.input_dim) {
        return Err(Error::DimensionMismatch {
            what: "input matrix row width",
            expected: arch.input_dim,
            actual: inputs.len() % arch.input_dim,
        });
    }
    let net = Network::new(arch);
    let mut scratch = Scratch::new(&net.layers);
    Ok(inputs
        .chunks(arch.input_dim)
        .map(|x| {
            net.forward_into(&params.weights, x, &mut scratch);
            net.output(&scratch, params.raw_global_noise)
        })
        .collect())
}

/// Sum of per-example log-densities over `subset` (all rows when `None`),
/// accumulated in ascending index order.
pub fn log_likelihood(
    arch: &Architecture,
    params: &ParamVector,
    data: &Dataset,
    subset: Option<&[usize]>,
) -> Result<f64> {
    check_data(arch, data)?;
    check_len("parameter vector", arch.num_weights(), params.weights.len())?;
    let idx = ordered_subset(subset, data.len())?;
    let net = Network::new(arch);
    let mut scratch = Scratch::new(&net.layers);
    let mut total = 0.0;
    for i in idx {
        let ll = net.point_log_lik(params, data.row(i), target_at(data, i), &mut scratch, None);
        if !ll.is_finite() {
            return Err(Error::NonFiniteLikelihood { index: i });
        }
        total += ll;
    }
    Ok(total)
}

/// Log-likelihood and its exact gradient; the gradient's `raw_global_noise`
/// slot is zero for categorical heads.
pub fn grad_log_likelihood(
    arch: &Architecture,
    params: &ParamVector,
    data: &Dataset,
    subset: Option<&[usize]>,
) -> Result<(f64, ParamVector)> {
    let mut flat = vec![0.0; arch.num_weights() + 1];
    let ll = accumulate_grad(arch, params, data, subset, &mut flat)?;
    Ok((ll, ParamVector::from_flat(&flat)))
}

/// Adds the gradient into `flat_grad` (length `d + 1`) and returns the log-likelihood.
pub(crate) fn accumulate_grad(
    arch: &Architecture,
    params: &ParamVector,
    data: &Dataset,
    subset: Option<&[usize]>,
    flat_grad: &mut [f64],
) -> Result<f64> {
    check_data(arch, data)?;
    check_len("parameter vector", arch.num_weights(), params.weights.len())?;
    check_len("gradient buffer", arch.num_weights() + 1, flat_grad.len())?;
    let idx = ordered_subset(subset, data.len())?;
    let net = Network::new(arch);
    let mut scratch = Scratch::new(&net.layers);
    let mut total = 0.0;
    for i in idx {
        let ll = net.point_log_lik(
            params,
            data.row(i),
            target_at(data, i),
            &mut scratch,
            Some(flat_grad),
        );
        if !ll.is_finite() {
            return Err(Error::NonFiniteLikelihood { index: i });
        }
        total += ll;
    }
    Ok(total)
}
