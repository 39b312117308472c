//! Dataset ingestion from CSV and the one-dimensional synthetic regression
//! problem with gaps between its input clusters.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::net::{self, Activation, Architecture, Head, NetOutput, ParamVector};

/// Which CSV column holds the target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetColumn {
    Index(i64),
    Name(String),
}

impl Default for TargetColumn {
    fn default() -> Self {
        TargetColumn::Index(-1)
    }
}

impl std::str::FromStr for TargetColumn {
    type Err = std::convert::Infallible;

    /// Integers select by position (negative counts from the end); anything
    /// else is a header name.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.parse::<i64>() {
            Ok(i) => TargetColumn::Index(i),
            Err(_) => TargetColumn::Name(s.to_string()),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Regression,
    Classification,
}

/// Raw numeric table with the target split off.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub inputs: Vec<f64>,
    pub input_dim: usize,
    pub targets: Targets,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Rows `indices` as a new table.
    pub fn subset(&self, indices: &[usize]) -> Result<RawTable> {
        let n = self.len();
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            inputs.extend_from_slice(&self.inputs[i * self.input_dim..(i + 1) * self.input_dim]);
        }
        let targets = match &self.targets {
            Targets::Real(t) => Targets::Real(indices.iter().map(|&i| t[i]).collect()),
            Targets::Class(t) => Targets::Class(indices.iter().map(|&i| t[i]).collect()),
        };
        Ok(RawTable {
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            inputs,
            input_dim: self.input_dim,
            targets,
        })
    }

    pub fn to_dataset(&self, standardize: bool) -> Result<Dataset> {
        if standardize {
            Dataset::standardized(&self.inputs, self.input_dim, self.targets.clone())
        } else {
            Dataset::new(self.inputs.clone(), self.input_dim, self.targets.clone())
        }
    }
}

pub fn read_csv_table<R: Read>(reader: R, target: &TargetColumn, task: Task) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let ncol = header.len();
    let t = match target {
        TargetColumn::Name(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.clone()))?,
        TargetColumn::Index(i) => {
            let idx = if *i < 0 { ncol as i64 + i } else { *i };
            if idx < 0 || idx >= ncol as i64 {
                return Err(Error::MissingColumn(format!("column index {i} of {ncol}")));
            }
            idx as usize
        }
    };
    if ncol < 2 {
        return Err(Error::Parse {
            line: 1,
            message: "need at least one feature column and a target column".into(),
        });
    }
    let mut inputs = Vec::new();
    let mut real = Vec::new();
    let mut class = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("column {:?}: {:?} is not a number", header[j], field),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("column {:?}: non-finite value", header[j]),
                });
            }
            if j != t {
                inputs.push(v);
                continue;
            }
            match task {
                Task::Regression => real.push(v),
                Task::Classification => {
                    if v < 0.0 || v.fract() != 0.0 {
                        return Err(Error::Parse {
                            line,
                            message: format!("class label {v} is not a non-negative integer"),
                        });
                    }
                    class.push(v as usize);
                }
            }
        }
    }
    let targets = match task {
        Task::Regression => Targets::Real(real),
        Task::Classification => Targets::Class(class),
    };
    if targets.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    let mut feature_names = header.clone();
    let target_name = feature_names.remove(t);
    Ok(RawTable {
        feature_names,
        target_name,
        inputs,
        input_dim: ncol - 1,
        targets,
    })
}

/// Reads a headed CSV in which every column is an input feature.
/// Returns the header, the row-major values and the column count.
pub fn read_csv_features<R: Read>(reader: R) -> Result<(Vec<String>, Vec<f64>, usize)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let mut values = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        for (j, field) in record.iter().enumerate() {
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(Error::Parse {
                        line,
                        message: format!(
                            "column {:?}: {:?} is not a finite number",
                            header[j], field
                        ),
                    })
                }
            }
        }
    }
    if values.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    let ncol = header.len();
    Ok((header, values, ncol))
}

pub fn load_csv_table(path: &Path, target: &TargetColumn, task: Task) -> Result<RawTable> {
    read_csv_table(File::open(path)?, target, task)
}

/// Loads a CSV, optionally standardizing every column with its own statistics.
pub fn load_csv_dataset(
    path: &Path,
    target: &TargetColumn,
    standardize: bool,
    task: Task,
) -> Result<Dataset> {
    load_csv_table(path, target, task)?.to_dataset(standardize)
}

/// Writes a dataset in model units, target last.
pub fn write_csv_dataset<W: Write>(
    writer: W,
    data: &Dataset,
    feature_names: &[String],
    target_name: &str,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = if feature_names.len() == data.input_dim() {
        feature_names.to_vec()
    } else {
        (0..data.input_dim()).map(|j| format!("x{j}")).collect()
    };
    header.push(target_name.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.len() {
        let mut row: Vec<String> = data.row(i).iter().map(|v| v.to_string()).collect();
        row.push(match data.targets() {
            Targets::Real(t) => t[i].to_string(),
            Targets::Class(t) => t[i].to_string(),
        });
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

/// Input clusters of the synthetic problem; the gaps between them carry no data.
pub const SYNTH_INTERVALS: [(f64, f64); 3] = [(-7.2, -4.8), (-1.2, 1.2), (4.8, 7.2)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "default_synth_points")]
    pub num_points: usize,
    #[serde(default = "default_synth_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_synth_points() -> usize {
    400
}
fn default_synth_noise() -> f64 {
    0.1
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_points: default_synth_points(),
            noise_std: default_synth_noise(),
            seed: 0,
        }
    }
}

/// The network shape used both to generate and to fit the synthetic data:
/// inputs `(x, x^2)`, four ReLU layers of widths 200, 50, 50, 50.
pub fn synth_architecture() -> Architecture {
    Architecture {
        input_dim: 1,
        hidden_sizes: vec![200, 50, 50, 50],
        head: Head::GaussianHeteroscedastic,
        activation: Activation::Relu,
        augment_square_input: true,
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub dataset: Dataset,
    pub teacher: ParamVector,
    pub config: SynthConfig,
}

/// Uniform inputs over the three clusters, targets from a randomly initialized
/// teacher network plus Gaussian noise. Inputs and targets are left unscaled.
pub fn synth_regression(config: &SynthConfig) -> Result<SynthData> {
    if !(config.noise_std >= 0.0) || config.num_points == 0 {
        return Err(Error::InvalidConfig(
            "synthetic data needs noise_std >= 0 and at least one point".into(),
        ));
    }
    let arch = synth_architecture();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let teacher = net::init_weights(&arch, rng.random());
    let total: f64 = SYNTH_INTERVALS.iter().map(|(a, b)| b - a).sum();
    let xs: Vec<f64> = (0..config.num_points)
        .map(|_| {
            let mut u = rng.random_range(0.0..total);
            for (a, b) in SYNTH_INTERVALS {
                if u < b - a {
                    return a + u;
                }
                u -= b - a;
            }
            SYNTH_INTERVALS[2].1
        })
        .collect();
    let noise = Normal::new(0.0, config.noise_std).expect("validated noise scale");
    let ys = net::forward_batch(&arch, &teacher, &xs)?
        .into_iter()
        .map(|o| match o {
            NetOutput::Gaussian { mean, .. } => mean + noise.sample(&mut rng),
            NetOutput::Categorical { .. } => unreachable!("regression teacher"),
        })
        .collect();
    Ok(SynthData {
        dataset: Dataset::new(xs, 1, Targets::Real(ys))?,
        teacher,
        config: config.clone(),
    })
}

/// True when `x` lies in one of the data clusters.
pub fn in_data_region(x: f64) -> bool {
    SYNTH_INTERVALS.iter().any(|&(a, b)| a <= x && x <= b)
}

/// True when `x` lies strictly between two adjacent clusters.
pub fn in_gap_region(x: f64) -> bool {
    SYNTH_INTERVALS.windows(2).any(|w| w[0].1 < x && x < w[1].0)
}
