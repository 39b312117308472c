use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Per-column affine transform applied to raw data before modelling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    /// Regression only; identity (0, 1) for class labels.
    pub target_mean: f64,
    pub target_std: f64,
}

impl Standardization {
    pub fn identity(input_dim: usize) -> Self {
        Self {
            input_mean: vec![0.0; input_dim],
            input_std: vec![1.0; input_dim],
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    /// Column statistics of a row-major matrix. Constant columns get std 1
    /// (with a warning) so the transform stays invertible.
    pub fn fit(inputs: &[f64], input_dim: usize, targets: Option<&[f64]>) -> Self {
        let n = inputs.len() / input_dim.max(1);
        let mut input_mean = vec![0.0; input_dim];
        let mut input_std = vec![1.0; input_dim];
        for j in 0..input_dim {
            let col = (0..n).map(|i| inputs[i * input_dim + j]);
            let (m, s) = mean_std(col, n);
            input_mean[j] = m;
            input_std[j] = if s > 0.0 {
                s
            } else {
                log::warn!("input column {j} is constant; leaving its scale at 1");
                1.0
            };
        }
        let (target_mean, target_std) = match targets {
            Some(t) => {
                let (m, s) = mean_std(t.iter().copied(), t.len());
                if s > 0.0 {
                    (m, s)
                } else {
                    log::warn!("target column is constant; leaving its scale at 1");
                    (m, 1.0)
                }
            }
            None => (0.0, 1.0),
        };
        Self {
            input_mean,
            input_std,
            target_mean,
            target_std,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_mean.len()
    }

    pub fn transform_input(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn transform_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn restore_target(&self, y: f64) -> f64 {
        y * self.target_std + self.target_mean
    }
}

/// Population mean and standard deviation (divide by n).
fn mean_std(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Real(Vec<f64>),
    Class(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(v) => v.len(),
            Targets::Class(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major design matrix plus targets, in model units.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    input_dim: usize,
    targets: Targets,
    standardization: Standardization,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, input_dim: usize, targets: Targets) -> Result<Self> {
        let standardization = Standardization::identity(input_dim);
        Self::with_standardization(inputs, input_dim, targets, standardization)
    }

    /// `inputs` and `targets` must already be in model (transformed) units.
    pub fn with_standardization(
        inputs: Vec<f64>,
        input_dim: usize,
        targets: Targets,
        standardization: Standardization,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidConfig(
                "input dimension must be positive".into(),
            ));
        }
        let n = targets.len();
        if n == 0 {
            return Err(Error::InvalidConfig(
                "dataset must have at least one row".into(),
            ));
        }
        check_len("dataset inputs", n * input_dim, inputs.len())?;
        check_len(
            "standardization columns",
            input_dim,
            standardization.input_dim(),
        )?;
        if standardization.input_std.iter().any(|s| !(*s > 0.0))
            || !(standardization.target_std > 0.0)
        {
            return Err(Error::InvalidConfig(
                "standardization scales must be positive".into(),
            ));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("dataset inputs must be finite".into()));
        }
        Ok(Self {
            inputs,
            input_dim,
            targets,
            standardization,
        })
    }

    /// Standardizes raw data with its own column statistics (regression targets
    /// included).
    pub fn standardized(raw_inputs: &[f64], input_dim: usize, targets: Targets) -> Result<Self> {
        let real = match &targets {
            Targets::Real(t) => Some(t.as_slice()),
            Targets::Class(_) => None,
        };
        let st = Standardization::fit(raw_inputs, input_dim, real);
        Self::from_raw(raw_inputs, input_dim, targets, st)
    }

    /// Applies an existing transform to raw data.
    pub fn from_raw(
        raw_inputs: &[f64],
        input_dim: usize,
        targets: Targets,
        st: Standardization,
    ) -> Result<Self> {
        check_len("standardization columns", input_dim, st.input_dim())?;
        let inputs = raw_inputs
            .chunks(input_dim)
            .flat_map(|row| st.transform_input(row))
            .collect();
        let targets = match targets {
            Targets::Real(t) => Targets::Real(t.iter().map(|&y| st.transform_target(y)).collect()),
            c => c,
        };
        Self::with_standardization(inputs, input_dim, targets, st)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    /// Rows in the given order, sharing this dataset's transform.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            inputs.extend_from_slice(self.row(i));
        }
        let targets = match &self.targets {
            Targets::Real(t) => Targets::Real(indices.iter().map(|&i| t[i]).collect()),
            Targets::Class(t) => Targets::Class(indices.iter().map(|&i| t[i]).collect()),
        };
        Self::with_standardization(
            inputs,
            self.input_dim,
            targets,
            self.standardization.clone(),
        )
    }

    /// Raw-unit inputs, inverting the stored transform.
    pub fn raw_inputs(&self) -> Vec<f64> {
        let st = &self.standardization;
        self.inputs
            .chunks(self.input_dim)
            .flat_map(|row| {
                row.iter()
                    .zip(st.input_mean.iter().zip(&st.input_std))
                    .map(|(x, (m, s))| x * s + m)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardized_columns_have_unit_scale() {
        let raw = [1.0, 10.0, 2.0, 10.0, 3.0, 10.0, 6.0, 10.0];
        let d = Dataset::standardized(&raw, 2, Targets::Real(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let col0: Vec<f64> = (0..4).map(|i| d.row(i)[0]).collect();
        let mean: f64 = col0.iter().sum::<f64>() / 4.0;
        let var: f64 = col0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
        // constant column keeps unit scale
        assert_eq!(d.standardization().input_std[1], 1.0);
        assert!(d.row(0)[1].abs() < 1e-15);
    }

    #[test]
    fn raw_inputs_invert_transform() {
        let raw = [0.5, -1.0, 3.0, 2.0];
        let d = Dataset::standardized(&raw, 1, Targets::Real(vec![0.0; 4])).unwrap();
        for (a, b) in d.raw_inputs().iter().zip(raw) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_empty_and_misaligned() {
        assert!(Dataset::new(vec![], 1, Targets::Real(vec![])).is_err());
        assert!(matches!(
            Dataset::new(vec![1.0, 2.0, 3.0], 2, Targets::Real(vec![0.0, 1.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
