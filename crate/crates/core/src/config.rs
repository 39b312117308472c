//! Experiment configuration: a TOML document with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SynthConfig, TargetColumn, Task};
use crate::error::{Error, Result};
use crate::inference::{ChainConfig, VIConfig};
use crate::net::{Activation, Architecture, Head};
use crate::subspace::{PcaScaling, SubspaceKind};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: PhaseConfig,
    #[serde(default = "PhaseConfig::swa_default")]
    pub swa: PhaseConfig,
    #[serde(default)]
    pub subspace: SubspaceConfig,
    pub inference: InferenceConfig,
}

fn default_trials() -> usize {
    20
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Csv,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub source: DataSource,
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub target: TargetColumn,
    #[serde(default)]
    pub task: Task,
    pub num_classes: Option<usize>,
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub synthetic: SynthConfig,
}

fn yes() -> bool {
    true
}
fn default_test_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden_sizes: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub augment_square_input: bool,
}

fn default_hidden() -> Vec<usize> {
    vec![50]
}
fn default_activation() -> Activation {
    Activation::Relu
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: default_hidden(),
            activation: default_activation(),
            augment_square_input: false,
        }
    }
}

/// One SGD phase, sized in epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Rows per batch; absent means a tenth of the training set.
    pub batch_size: Option<usize>,
    /// Epochs between trajectory captures (averaging phase only).
    #[serde(default = "one")]
    pub capture_every_epochs: usize,
    #[serde(default = "default_max_rank")]
    pub max_deviation_cols: usize,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    200
}
fn one() -> usize {
    1
}
fn default_max_rank() -> usize {
    20
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_wd(),
            epochs: default_epochs(),
            batch_size: None,
            capture_every_epochs: 1,
            max_deviation_cols: default_max_rank(),
        }
    }
}

impl PhaseConfig {
    fn swa_default() -> Self {
        Self {
            epochs: 50,
            ..Self::default()
        }
    }

    pub fn batch_size_for(&self, n: usize) -> usize {
        self.batch_size.unwrap_or((n / 10).max(1)).min(n).max(1)
    }

    /// Step-based trainer settings for `n` training rows.
    pub fn train_config(&self, n: usize, seed: u64) -> TrainConfig {
        let batch = self.batch_size_for(n);
        let steps_per_epoch = n.div_ceil(batch);
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            num_steps: self.epochs * steps_per_epoch,
            capture_frequency: self.capture_every_epochs.max(1) * steps_per_epoch,
            max_deviation_cols: self.max_deviation_cols,
            batch_size: batch,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubspaceConfig {
    #[serde(default = "default_kind")]
    pub kind: SubspaceKind,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default)]
    pub scaling: PcaScaling,
    #[serde(default)]
    pub noise_coordinate: bool,
    /// Curve subspace: epochs of bend training.
    #[serde(default = "default_curve_epochs")]
    pub curve_epochs: usize,
}

fn default_kind() -> SubspaceKind {
    SubspaceKind::Pca
}
fn default_rank() -> usize {
    10
}
fn default_curve_epochs() -> usize {
    100
}

impl Default for SubspaceConfig {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            rank: default_rank(),
            scaling: PcaScaling::default(),
            noise_coordinate: false,
            curve_epochs: default_curve_epochs(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Ess,
    Vi,
}

/// A fixed temperature, or a grid searched on validation splits of the
/// training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TemperatureSetting {
    Fixed(f64),
    Search {
        grid: Vec<f64>,
        #[serde(default = "default_validation_splits")]
        validation_splits: usize,
    },
}

fn default_validation_splits() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    #[serde(default)]
    pub method: Method,
    pub temperature: TemperatureSetting,
    #[serde(default = "one_f64")]
    pub prior_std: f64,
    #[serde(default = "default_num_samples")]
    pub num_samples: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "one")]
    pub thinning: usize,
    #[serde(default)]
    pub vi: VIConfig,
}

fn one_f64() -> f64 {
    1.0
}
fn default_num_samples() -> usize {
    30
}
fn default_burn_in() -> usize {
    500
}

impl InferenceConfig {
    pub fn chain_config(&self, seed: u64) -> ChainConfig {
        ChainConfig::new(self.num_samples, self.burn_in, self.thinning, seed)
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Checks every field that later stages rely on.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.data.source == DataSource::Csv && self.data.path.is_none() {
            return bad("data.path is required for csv data".into());
        }
        if self.data.task == Task::Classification && self.data.num_classes.unwrap_or(0) < 2 {
            return bad("classification needs data.num_classes >= 2".into());
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return bad(format!(
                "data.test_fraction must lie in (0, 1), got {}",
                self.data.test_fraction
            ));
        }
        for (name, p) in [("train", &self.train), ("swa", &self.swa)] {
            if !(p.learning_rate >= 0.0)
                || !(p.momentum >= 0.0 && p.momentum < 1.0)
                || !(p.weight_decay >= 0.0)
            {
                return bad(format!(
                    "{name}: learning_rate, momentum or weight_decay out of range"
                ));
            }
            if p.batch_size == Some(0) {
                return bad(format!("{name}.batch_size must be positive"));
            }
        }
        if self.swa.epochs == 0 && self.subspace.kind == SubspaceKind::Pca {
            return bad("swa.epochs must be positive for a pca subspace".into());
        }
        if self.subspace.rank == 0 {
            return bad("subspace.rank must be positive".into());
        }
        if self.subspace.kind == SubspaceKind::Pca
            && self.subspace.rank > self.swa.max_deviation_cols
        {
            return bad(format!(
                "subspace.rank {} exceeds swa.max_deviation_cols {}",
                self.subspace.rank, self.swa.max_deviation_cols
            ));
        }
        let inf = &self.inference;
        match &inf.temperature {
            TemperatureSetting::Fixed(t) if !(*t > 0.0) => {
                return bad(format!("temperature must be positive, got {t}"))
            }
            TemperatureSetting::Search {
                grid,
                validation_splits,
            } => {
                if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0)) {
                    return bad("temperature grid must be non-empty and positive".into());
                }
                if *validation_splits == 0 {
                    return bad("validation_splits must be at least 1".into());
                }
            }
            _ => {}
        }
        if !(inf.prior_std > 0.0) || !inf.prior_std.is_finite() {
            return bad("inference.prior_std must be positive".into());
        }
        if inf.num_samples == 0 || inf.thinning == 0 {
            return bad("inference.num_samples and thinning must be positive".into());
        }
        if inf.method == Method::Vi && (inf.vi.mc_samples == 0 || !(inf.vi.learning_rate > 0.0)) {
            return bad("inference.vi needs mc_samples >= 1 and a positive learning_rate".into());
        }
        self.architecture(1)?;
        Ok(())
    }

    /// Network for inputs of width `input_dim`.
    pub fn architecture(&self, input_dim: usize) -> Result<Architecture> {
        let head = match self.data.task {
            Task::Regression => Head::GaussianHeteroscedastic,
            Task::Classification => Head::Categorical {
                num_classes: self.data.num_classes.unwrap_or(0),
            },
        };
        Architecture::new(
            input_dim,
            self.model.hidden_sizes.clone(),
            head,
            self.model.activation,
            self.model.augment_square_input,
        )
    }
}

/// Applies `a.b.c=value` to a TOML table. The value is read as a TOML literal
/// when it parses as one, otherwise as a bare string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!("bad override key {key:?}")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            Error::InvalidConfig(format!("override {key:?}: {part:?} is not a table"))
        })?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
