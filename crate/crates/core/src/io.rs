//! Versioned JSON envelopes for checkpoints, subspaces and sample sets.
//!
//! Floating-point payloads are base64-encoded little-endian `f64` arrays, so a
//! save/load cycle reproduces every bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::dataset::Standardization;
use crate::error::{Error, Result};
use crate::inference::{Provenance, SampleSet, VIPosterior};
use crate::net::{Architecture, ParamVector};
use crate::subspace::{Subspace, SubspaceKind};
use crate::train::DeviationBuffer;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Checkpoint,
    Subspace,
    Samples,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub format_version: u32,
    pub kind: Kind,
    pub meta: Map<String, Value>,
    pub data: BTreeMap<String, String>,
}

impl Envelope {
    pub fn new(kind: Kind) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            meta: Map::new(),
            data: BTreeMap::new(),
        }
    }

    pub fn put(&mut self, key: &str, values: &[f64]) {
        self.data.insert(key.to_string(), encode_f64s(values));
    }

    pub fn get(&self, key: &str) -> Result<Vec<f64>> {
        let s = self
            .data
            .get(key)
            .ok_or_else(|| Error::Format(format!("missing data field {key:?}")))?;
        decode_f64s(s)
    }

    pub fn get_opt(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.data.get(key).map(|s| decode_f64s(s)).transpose()
    }

    fn meta_as<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Format(format!("missing meta field {key:?}")))?;
        serde_json::from_value(v.clone())
            .map_err(|e| Error::Format(format!("meta field {key:?}: {e}")))
    }

    fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a {kind:?} file, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Format(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "payload of {} bytes is not a whole number of f64s",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn put_matrix(env: &mut Envelope, key: &str, rows: &[Vec<f64>]) {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    env.put(key, &flat);
    env.meta.insert(format!("{key}_rows"), json!(rows.len()));
}

fn get_matrix(env: &Envelope, key: &str) -> Result<Vec<Vec<f64>>> {
    let rows: usize = env.meta_as(&format!("{key}_rows"))?;
    let flat = env.get(key)?;
    if rows == 0 {
        return if flat.is_empty() {
            Ok(Vec::new())
        } else {
            Err(Error::Format(format!(
                "{key}: zero rows but non-empty payload"
            )))
        };
    }
    if flat.len() % rows != 0 {
        return Err(Error::Format(format!(
            "{key}: {} values do not split into {rows} rows",
            flat.len()
        )));
    }
    Ok(flat
        .chunks(flat.len() / rows)
        .map(<[f64]>::to_vec)
        .collect())
}

fn put_standardization(env: &mut Envelope, st: &Standardization) {
    env.put("input_mean", &st.input_mean);
    env.put("input_std", &st.input_std);
    env.put("target_affine", &[st.target_mean, st.target_std]);
}

fn get_standardization(env: &Envelope) -> Result<Option<Standardization>> {
    let Some(input_mean) = env.get_opt("input_mean")? else {
        return Ok(None);
    };
    let input_std = env.get("input_std")?;
    let t = env.get("target_affine")?;
    if t.len() != 2 || input_std.len() != input_mean.len() {
        return Err(Error::Format("malformed standardization".into()));
    }
    Ok(Some(Standardization {
        input_mean,
        input_std,
        target_mean: t[0],
        target_std: t[1],
    }))
}

fn put_params(env: &mut Envelope, prefix: &str, p: &ParamVector) {
    env.put(&format!("{prefix}weights"), &p.weights);
    env.put(&format!("{prefix}raw_global_noise"), &[p.raw_global_noise]);
}

fn get_params(env: &Envelope, prefix: &str) -> Result<ParamVector> {
    let weights = env.get(&format!("{prefix}weights"))?;
    let raw = env.get(&format!("{prefix}raw_global_noise"))?;
    if raw.len() != 1 {
        return Err(Error::Format("raw_global_noise must hold one value".into()));
    }
    Ok(ParamVector {
        weights,
        raw_global_noise: raw[0],
    })
}

/// Trained network state, optionally with the deviation buffer collected
/// during the averaging phase.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub params: ParamVector,
    pub standardization: Option<Standardization>,
    pub seed: u64,
    pub steps: usize,
    pub deviations: Option<DeviationBuffer>,
    /// Free-form provenance (dataset, hyperparameters, ...).
    pub extra: Map<String, Value>,
}

impl Checkpoint {
    pub fn new(arch: Architecture, params: ParamVector, seed: u64, steps: usize) -> Self {
        Self {
            arch,
            params,
            standardization: None,
            seed,
            steps,
            deviations: None,
            extra: Map::new(),
        }
    }

    pub fn to_envelope(&self) -> Envelope {
        let mut env = Envelope::new(Kind::Checkpoint);
        env.meta.insert("architecture".into(), json!(self.arch));
        env.meta.insert("seed".into(), json!(self.seed));
        env.meta.insert("steps".into(), json!(self.steps));
        env.meta
            .insert("extra".into(), Value::Object(self.extra.clone()));
        put_params(&mut env, "", &self.params);
        if let Some(st) = &self.standardization {
            put_standardization(&mut env, st);
        }
        if let Some(buf) = &self.deviations {
            let cols: Vec<Vec<f64>> = buf.columns().cloned().collect();
            put_matrix(&mut env, "deviations", &cols);
            env.meta
                .insert("deviations_max_columns".into(), json!(buf.max_columns()));
            env.meta
                .insert("deviations_captured".into(), json!(buf.n_captured()));
        }
        env
    }

    pub fn from_envelope(env: &Envelope) -> Result<Self> {
        env.expect_kind(Kind::Checkpoint)?;
        let arch: Architecture = env.meta_as("architecture")?;
        arch.validate()?;
        let params = get_params(env, "")?;
        params.check(&arch)?;
        let deviations = if env.data.contains_key("deviations") {
            Some(DeviationBuffer::from_columns(
                get_matrix(env, "deviations")?,
                env.meta_as("deviations_max_columns")?,
                env.meta_as("deviations_captured")?,
            )?)
        } else {
            None
        };
        Ok(Self {
            arch,
            params,
            standardization: get_standardization(env)?,
            seed: env.meta_as("seed")?,
            steps: env.meta_as("steps")?,
            deviations,
            extra: env
                .meta_as::<Map<String, Value>>("extra")
                .unwrap_or_default(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_envelope().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_envelope(&Envelope::load(path)?)
    }
}

/// A subspace together with the network it parameterizes.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceFile {
    pub arch: Architecture,
    pub subspace: Subspace,
    pub standardization: Option<Standardization>,
    pub extra: Map<String, Value>,
}

impl SubspaceFile {
    pub fn to_envelope(&self) -> Envelope {
        let s = &self.subspace;
        let mut env = Envelope::new(Kind::Subspace);
        env.meta.insert("architecture".into(), json!(self.arch));
        env.meta.insert("subspace_kind".into(), json!(s.kind()));
        env.meta
            .insert("noise_coordinate".into(), json!(s.has_noise_coordinate()));
        env.meta
            .insert("extra".into(), Value::Object(self.extra.clone()));
        put_params(&mut env, "shift_", s.shift());
        put_matrix(&mut env, "basis", s.basis());
        if let Some(sv) = s.singular_values() {
            env.put("singular_values", sv);
        }
        if let Some(st) = &self.standardization {
            put_standardization(&mut env, st);
        }
        env
    }

    pub fn from_envelope(env: &Envelope) -> Result<Self> {
        env.expect_kind(Kind::Subspace)?;
        let arch: Architecture = env.meta_as("architecture")?;
        arch.validate()?;
        let kind: SubspaceKind = env.meta_as("subspace_kind")?;
        let shift = get_params(env, "shift_")?;
        shift.check(&arch)?;
        let mut subspace = Subspace::new(kind, shift, get_matrix(env, "basis")?)?;
        if env.meta_as::<bool>("noise_coordinate")? {
            subspace = subspace.with_noise_coordinate();
        }
        if let Some(sv) = env.get_opt("singular_values")? {
            subspace = subspace.with_singular_values(sv);
        }
        Ok(Self {
            arch,
            subspace,
            standardization: get_standardization(env)?,
            extra: env
                .meta_as::<Map<String, Value>>("extra")
                .unwrap_or_default(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_envelope().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_envelope(&Envelope::load(path)?)
    }
}

/// Posterior draws, plus the variational parameters when they came from VI.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplesFile {
    pub samples: SampleSet,
    pub temperature: f64,
    pub prior_std: f64,
    pub variational: Option<VIPosterior>,
    pub extra: Map<String, Value>,
}

impl SamplesFile {
    pub fn to_envelope(&self) -> Envelope {
        let mut env = Envelope::new(Kind::Samples);
        env.meta
            .insert("provenance".into(), json!(self.samples.provenance));
        env.meta
            .insert("num_samples".into(), json!(self.samples.len()));
        env.meta.insert("dim".into(), json!(self.samples.dim()));
        env.meta
            .insert("extra".into(), Value::Object(self.extra.clone()));
        put_matrix(&mut env, "samples", &self.samples.samples);
        env.put("log_posteriors", &self.samples.log_posteriors);
        env.put("temperature", &[self.temperature]);
        env.put("prior_std", &[self.prior_std]);
        if let Some(q) = &self.variational {
            env.put("vi_mean", &q.mean);
            env.put("vi_raw_std", &q.raw_std);
        }
        env
    }

    pub fn from_envelope(env: &Envelope) -> Result<Self> {
        env.expect_kind(Kind::Samples)?;
        let provenance: Provenance = env.meta_as("provenance")?;
        let samples = get_matrix(env, "samples")?;
        let log_posteriors = env.get("log_posteriors")?;
        if log_posteriors.len() != samples.len() {
            return Err(Error::Format(
                "samples and log_posteriors disagree in length".into(),
            ));
        }
        let scalar = |key: &str| -> Result<f64> {
            env.get(key)?
                .first()
                .copied()
                .ok_or_else(|| Error::Format(format!("{key} is empty")))
        };
        let variational = match (env.get_opt("vi_mean")?, env.get_opt("vi_raw_std")?) {
            (Some(mean), Some(raw_std)) => Some(VIPosterior { mean, raw_std }),
            _ => None,
        };
        Ok(Self {
            samples: SampleSet {
                samples,
                log_posteriors,
                provenance,
            },
            temperature: scalar("temperature")?,
            prior_std: scalar("prior_std")?,
            variational,
            extra: env
                .meta_as::<Map<String, Value>>("extra")
                .unwrap_or_default(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_envelope().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_envelope(&Envelope::load(path)?)
    }
}
