//! Affine subspaces `w = shift + P z` of weight space and their construction:
//! random directions, principal components of the SGD trajectory, and the
//! plane through a trained low-loss curve.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{self, axpy, dot, norm};
use crate::net::{Architecture, ParamVector};
use crate::train::{BatchSampler, DeviationBuffer, NetObjective, Objective, TraceRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubspaceKind {
    Random,
    Pca,
    Curve,
}

/// Column scaling for the PCA basis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PcaScaling {
    /// `s_i v_i / sqrt(M - 1)`: a unit Gaussian in `z` reproduces the
    /// empirical trajectory covariance.
    #[default]
    SampleCovariance,
    /// `s_i v_i`, the bare `P = S V^T`.
    SingularValues,
}

/// `w = shift + sum_i z_i basis_i`.
///
/// The global noise parameter is held at the shift's value unless
/// `noise_coordinate` is set, in which case one extra trailing coordinate of
/// `z` is added to `raw_global_noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct Subspace {
    kind: SubspaceKind,
    shift: ParamVector,
    basis: Vec<Vec<f64>>,
    noise_coordinate: bool,
    singular_values: Option<Vec<f64>>,
}

impl Subspace {
    pub fn new(kind: SubspaceKind, shift: ParamVector, basis: Vec<Vec<f64>>) -> Result<Self> {
        if basis.is_empty() {
            return Err(Error::InvalidConfig(
                "subspace needs at least one direction".into(),
            ));
        }
        for (i, col) in basis.iter().enumerate() {
            check_len("basis column", shift.len(), col.len())?;
            let n = norm(col);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "basis column {i} is zero or non-finite"
                )));
            }
        }
        Ok(Self {
            kind,
            shift,
            basis,
            noise_coordinate: false,
            singular_values: None,
        })
    }

    /// Adds a trailing coordinate that moves the raw global noise.
    pub fn with_noise_coordinate(mut self) -> Self {
        self.noise_coordinate = true;
        self
    }

    pub fn with_singular_values(mut self, values: Vec<f64>) -> Self {
        self.singular_values = Some(values);
        self
    }

    pub fn kind(&self) -> SubspaceKind {
        self.kind
    }

    pub fn shift(&self) -> &ParamVector {
        &self.shift
    }

    /// Columns of `P` over the network weights.
    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn has_noise_coordinate(&self) -> bool {
        self.noise_coordinate
    }

    pub fn singular_values(&self) -> Option<&[f64]> {
        self.singular_values.as_deref()
    }

    /// Number of subspace coordinates `K`.
    pub fn dim(&self) -> usize {
        self.basis.len() + usize::from(self.noise_coordinate)
    }

    /// Weight-space dimension `d`.
    pub fn ambient_dim(&self) -> usize {
        self.shift.len()
    }

    pub fn embed(&self, z: &[f64]) -> Result<ParamVector> {
        check_len("subspace coordinates", self.dim(), z.len())?;
        let mut w = self.shift.clone();
        for (zi, col) in z.iter().zip(&self.basis) {
            axpy(*zi, col, &mut w.weights);
        }
        if self.noise_coordinate {
            w.raw_global_noise += z[self.basis.len()];
        }
        Ok(w)
    }

    /// Pulls a weight-space gradient back to subspace coordinates: `P^T g`.
    pub fn project_gradient(&self, grad: &ParamVector) -> Result<Vec<f64>> {
        check_len("gradient", self.ambient_dim(), grad.len())?;
        let mut out: Vec<f64> = self
            .basis
            .iter()
            .map(|col| dot(col, &grad.weights))
            .collect();
        if self.noise_coordinate {
            out.push(grad.raw_global_noise);
        }
        Ok(out)
    }
}

/// `K` i.i.d. standard-normal directions, each rescaled to unit norm.
pub fn random_subspace(d: usize, k: usize, shift: ParamVector, seed: u64) -> Result<Subspace> {
    check_len("shift", d, shift.len())?;
    if k == 0 || k > d {
        return Err(Error::InvalidConfig(format!(
            "random subspace needs 1 <= K <= d, got K={k}, d={d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = (0..k)
        .map(|_| {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = norm(&v);
            linalg::scale(1.0 / n, &mut v);
            v
        })
        .collect();
    Subspace::new(SubspaceKind::Random, shift, basis)
}

/// Top singular triples of the `M x d` deviation matrix `A`.
#[derive(Clone, Debug)]
pub struct TruncatedSvd {
    /// Descending.
    pub singular_values: Vec<f64>,
    /// Unit right singular vectors, length `d`; largest-magnitude entry positive.
    pub right_vectors: Vec<Vec<f64>>,
}

/// Thin SVD of the buffer via the `M x M` Gram matrix `A A^T = U S^2 U^T`,
/// recovering `v_i = A^T u_i / s_i`. Directions with `s_i` below a relative
/// floor are dropped, so the result holds at most the numerical rank.
pub fn deviation_svd(buffer: &DeviationBuffer) -> Result<TruncatedSvd> {
    let rows: Vec<&Vec<f64>> = buffer.columns().collect();
    let m = rows.len();
    if m == 0 {
        return Err(Error::ZeroBuffer);
    }
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let g = dot(rows[i], rows[j]);
            gram[i * m + j] = g;
            gram[j * m + i] = g;
        }
    }
    let eig = linalg::symmetric_eigen(&gram, m);
    let top = eig.values.first().copied().unwrap_or(0.0);
    if !(top > 0.0) {
        return Err(Error::ZeroBuffer);
    }
    let d = rows[0].len();
    let mut singular_values = Vec::new();
    let mut right_vectors = Vec::new();
    for (lambda, u) in eig.values.iter().zip(&eig.vectors) {
        // Squared singular values carry absolute error ~ eps * s_1^2.
        if *lambda <= RANK_TOLERANCE * RANK_TOLERANCE * top {
            break;
        }
        let s = lambda.sqrt();
        let mut v = vec![0.0; d];
        for (ui, row) in u.iter().zip(&rows) {
            axpy(*ui, row, &mut v);
        }
        linalg::scale(1.0 / s, &mut v);
        fix_sign(&mut v);
        singular_values.push(s);
        right_vectors.push(v);
    }
    Ok(TruncatedSvd {
        singular_values,
        right_vectors,
    })
}

/// Relative singular-value floor below which a direction counts as zero.
const RANK_TOLERANCE: f64 = 1e-7;

fn fix_sign(v: &mut [f64]) {
    let pivot = v.iter().copied().fold(
        0.0_f64,
        |best, x| if x.abs() > best.abs() { x } else { best },
    );
    if pivot < 0.0 {
        linalg::scale(-1.0, v);
    }
}

/// PCA subspace centred at the SWA mean with columns `s_i v_i / sqrt(M - 1)`
/// (or `s_i v_i`, per `scaling`).
pub fn pca_subspace(
    buffer: &DeviationBuffer,
    w_swa: ParamVector,
    k: usize,
    scaling: PcaScaling,
) -> Result<Subspace> {
    let m = buffer.num_columns();
    if k == 0 {
        return Err(Error::InvalidConfig("PCA rank K must be at least 1".into()));
    }
    if k > m {
        return Err(Error::InvalidConfig(format!(
            "PCA rank K={k} exceeds the {m} stored deviation columns"
        )));
    }
    if let Some(d) = buffer.dim() {
        check_len("SWA mean", d, w_swa.len())?;
    }
    let svd = deviation_svd(buffer)?;
    let rank = svd.singular_values.len();
    if rank < k {
        return Err(Error::RankDeficient { rank, requested: k });
    }
    let denom = match scaling {
        // A single column has no sample covariance; fall back to unit scaling.
        PcaScaling::SampleCovariance => ((m.max(2) - 1) as f64).sqrt(),
        PcaScaling::SingularValues => 1.0,
    };
    let basis = svd
        .singular_values
        .iter()
        .zip(&svd.right_vectors)
        .take(k)
        .map(|(s, v)| v.iter().map(|x| x * s / denom).collect())
        .collect();
    Ok(Subspace::new(SubspaceKind::Pca, w_swa, basis)?
        .with_singular_values(svd.singular_values[..k].to_vec()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveEndpoints {
    pub w0: ParamVector,
    pub w1: ParamVector,
    pub w_half: ParamVector,
}

/// Plane through two solutions and the curve midpoint:
/// `shift = (w0 + w1)/2`, `v1 ∝ w0 - shift`, `v2 ∝ w_half - shift`, both unit norm.
///
/// Only weights span the plane; the global noise stays at the endpoints' mean.
pub fn curve_subspace(endpoints: &CurveEndpoints) -> Result<Subspace> {
    let d = endpoints.w0.len();
    check_len("curve endpoint w1", d, endpoints.w1.len())?;
    check_len("curve midpoint", d, endpoints.w_half.len())?;
    let shift = ParamVector {
        weights: endpoints
            .w0
            .weights
            .iter()
            .zip(&endpoints.w1.weights)
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
        raw_global_noise: 0.5 * (endpoints.w0.raw_global_noise + endpoints.w1.raw_global_noise),
    };
    let direction = |p: &ParamVector, what: &'static str| -> Result<Vec<f64>> {
        let mut v: Vec<f64> = p
            .weights
            .iter()
            .zip(&shift.weights)
            .map(|(a, b)| a - b)
            .collect();
        let n = norm(&v);
        if !(n > CURVE_TOLERANCE * (1.0 + norm(&shift.weights))) {
            return Err(Error::DegenerateGeometry { what, norm: n });
        }
        linalg::scale(1.0 / n, &mut v);
        Ok(v)
    };
    let v1 = direction(&endpoints.w0, "w0 - shift")?;
    let v2 = direction(&endpoints.w_half, "w_half - shift")?;
    let sin2 = 1.0 - dot(&v1, &v2).powi(2);
    if !(sin2 > CURVE_TOLERANCE * CURVE_TOLERANCE) {
        return Err(Error::DegenerateGeometry {
            what: "midpoint direction orthogonal to the endpoint line",
            norm: sin2.max(0.0).sqrt(),
        });
    }
    Subspace::new(SubspaceKind::Curve, shift, vec![v1, v2])
}

const CURVE_TOLERANCE: f64 = 1e-10;

/// Coordinates of `(w0, w_half)` in the curve subspace built from `endpoints`.
pub fn curve_coordinates(endpoints: &CurveEndpoints) -> (f64, f64) {
    let half = |p: &ParamVector| -> f64 {
        p.weights
            .iter()
            .zip(endpoints.w0.weights.iter().zip(&endpoints.w1.weights))
            .map(|(x, (a, b))| (x - 0.5 * (a + b)).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    (half(&endpoints.w0), half(&endpoints.w_half))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    pub num_steps: usize,
    pub learning_rate: f64,
    #[serde(default = "default_curve_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_curve_momentum() -> f64 {
    0.9
}

/// Point on the quadratic Bezier `(1-t)^2 w0 + 2t(1-t) bend + t^2 w1`.
pub fn bezier_point(w0: &[f64], bend: &[f64], w1: &[f64], t: f64) -> Vec<f64> {
    let (a, b, c) = ((1.0 - t) * (1.0 - t), 2.0 * t * (1.0 - t), t * t);
    w0.iter()
        .zip(bend)
        .zip(w1)
        .map(|((x0, th), x1)| a * x0 + b * th + c * x1)
        .collect()
}

#[derive(Clone, Debug)]
pub struct CurveOutcome {
    pub bend: Vec<f64>,
    pub midpoint: Vec<f64>,
    pub trace: Vec<TraceRecord>,
}

/// Trains the bend of a quadratic Bezier between fixed endpoints by SGD on
/// `E_{t ~ U[0,1]} loss(phi(t))`, one `t` per step; the bend starts at the
/// endpoints' mean.
pub fn find_curve<O: Objective + ?Sized>(
    objective: &O,
    w0: &[f64],
    w1: &[f64],
    config: &CurveConfig,
) -> Result<CurveOutcome> {
    let p = objective.num_params();
    check_len("curve endpoint w0", p, w0.len())?;
    check_len("curve endpoint w1", p, w1.len())?;
    if config.batch_size == 0 || config.batch_size > objective.num_examples() {
        return Err(Error::InvalidConfig(format!(
            "curve batch_size must lie in 1..={}",
            objective.num_examples()
        )));
    }
    if !(config.learning_rate >= 0.0) || !(0.0..1.0).contains(&config.momentum) {
        return Err(Error::InvalidConfig(
            "curve learning_rate/momentum out of range".into(),
        ));
    }
    let decayed = objective.num_weights();
    let mut bend: Vec<f64> = w0.iter().zip(w1).map(|(a, b)| 0.5 * (a + b)).collect();
    let mut velocity = vec![0.0; p];
    let mut grad = vec![0.0; p];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_c0de);
    let unit = Uniform::new(0.0, 1.0).expect("valid interval");
    let mut batches = BatchSampler::new(objective.num_examples(), config.batch_size, config.seed);
    let mut trace = Vec::with_capacity(config.num_steps);
    for step in 1..=config.num_steps {
        let t: f64 = unit.sample(&mut rng);
        let point = bezier_point(w0, &bend, w1, t);
        let loss = objective.loss_and_grad(&point, batches.next_batch(), &mut grad)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let coef = 2.0 * t * (1.0 - t);
        for i in 0..p {
            let decay = if i < decayed {
                config.weight_decay * bend[i]
            } else {
                0.0
            };
            velocity[i] = config.momentum * velocity[i] + coef * grad[i] + decay;
            bend[i] -= config.learning_rate * velocity[i];
        }
        trace.push(TraceRecord {
            step,
            loss,
            learning_rate: config.learning_rate,
        });
    }
    let midpoint = bezier_point(w0, &bend, w1, 0.5);
    Ok(CurveOutcome {
        bend,
        midpoint,
        trace,
    })
}

/// Network form of [`find_curve`]; returns the curve midpoint.
pub fn find_network_curve(
    arch: &Architecture,
    w0: &ParamVector,
    w1: &ParamVector,
    data: &crate::dataset::Dataset,
    config: &CurveConfig,
) -> Result<ParamVector> {
    w0.check(arch)?;
    w1.check(arch)?;
    let objective = NetObjective::new(arch, data);
    let out = find_curve(&objective, &w0.to_flat(), &w1.to_flat(), config)?;
    Ok(ParamVector::from_flat(&out.midpoint))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(w: &[f64]) -> ParamVector {
        ParamVector {
            weights: w.to_vec(),
            raw_global_noise: 0.4,
        }
    }

    #[test]
    fn embed_origin_and_basis() {
        let s = Subspace::new(
            SubspaceKind::Random,
            pv(&[1.0, 2.0, 3.0]),
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.5, 0.5]],
        )
        .unwrap();
        assert_eq!(s.embed(&[0.0, 0.0]).unwrap(), pv(&[1.0, 2.0, 3.0]));
        assert_eq!(s.embed(&[0.0, 1.0]).unwrap(), pv(&[1.0, 2.5, 3.5]));
        assert!(matches!(
            s.embed(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn noise_coordinate_moves_global_noise() {
        let s = Subspace::new(SubspaceKind::Random, pv(&[0.0, 0.0]), vec![vec![1.0, 0.0]])
            .unwrap()
            .with_noise_coordinate();
        assert_eq!(s.dim(), 2);
        let w = s.embed(&[2.0, -0.1]).unwrap();
        assert_eq!(w.weights, vec![2.0, 0.0]);
        assert!((w.raw_global_noise - 0.3).abs() < 1e-15);
    }

    #[test]
    fn random_columns_are_unit() {
        let s = random_subspace(50, 4, ParamVector::zeros(50), 11).unwrap();
        for c in s.basis() {
            assert!((norm(c) - 1.0).abs() < 1e-12);
        }
        assert_eq!(
            s,
            random_subspace(50, 4, ParamVector::zeros(50), 11).unwrap()
        );
        assert!(matches!(
            random_subspace(3, 4, ParamVector::zeros(3), 1),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn rank_one_buffer() {
        let a = vec![1.0, -2.0, 0.5];
        let mut buf = DeviationBuffer::new(4);
        for s in [1.0, -1.0, 2.0, 0.5] {
            buf.push(a.iter().map(|x| x * s).collect());
        }
        let sub =
            pca_subspace(&buf, ParamVector::zeros(3), 1, PcaScaling::SampleCovariance).unwrap();
        let p = &sub.basis()[0];
        let cos = dot(p, &a) / (norm(p) * norm(&a));
        assert!((cos.abs() - 1.0).abs() < 1e-12);
        assert!(matches!(
            pca_subspace(&buf, ParamVector::zeros(3), 2, PcaScaling::SampleCovariance),
            Err(Error::RankDeficient {
                rank: 1,
                requested: 2
            })
        ));
    }

    #[test]
    fn pca_rejects_too_many_components() {
        let mut buf = DeviationBuffer::new(2);
        buf.push(vec![1.0, 0.0]);
        assert!(matches!(
            pca_subspace(&buf, ParamVector::zeros(2), 2, PcaScaling::SampleCovariance),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn curve_round_trip() {
        let e = CurveEndpoints {
            w0: pv(&[1.0, 0.0, 0.0]),
            w1: pv(&[-1.0, 0.0, 2.0]),
            w_half: pv(&[0.5, 3.0, 1.0]),
        };
        let s = curve_subspace(&e).unwrap();
        let (a, b) = curve_coordinates(&e);
        let back = s.embed(&[a, 0.0]).unwrap();
        for (x, y) in back.weights.iter().zip(&e.w0.weights) {
            assert!((x - y).abs() < 1e-12);
        }
        let other = s.embed(&[-a, 0.0]).unwrap();
        for (x, y) in other.weights.iter().zip(&e.w1.weights) {
            assert!((x - y).abs() < 1e-12);
        }
        let mid = s.embed(&[0.0, b]).unwrap();
        for (x, y) in mid.weights.iter().zip(&e.w_half.weights) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn curve_rejects_degenerate_geometry() {
        let same = CurveEndpoints {
            w0: pv(&[1.0, 1.0]),
            w1: pv(&[1.0, 1.0]),
            w_half: pv(&[0.0, 2.0]),
        };
        assert!(matches!(
            curve_subspace(&same),
            Err(Error::DegenerateGeometry { .. })
        ));
        let collinear = CurveEndpoints {
            w0: pv(&[1.0, 0.0]),
            w1: pv(&[-1.0, 0.0]),
            w_half: pv(&[0.5, 0.0]),
        };
        assert!(matches!(
            curve_subspace(&collinear),
            Err(Error::DegenerateGeometry { .. })
        ));
    }

    #[test]
    fn bezier_endpoints() {
        let (a, th, b) = ([0.0, 1.0], [5.0, 5.0], [2.0, 3.0]);
        assert_eq!(bezier_point(&a, &th, &b, 0.0), a.to_vec());
        assert_eq!(bezier_point(&a, &th, &b, 1.0), b.to_vec());
        assert_eq!(
            bezier_point(&a, &th, &b, 0.5),
            vec![0.25 * 0.0 + 2.5 + 0.5, 0.25 + 2.5 + 0.75]
        );
    }
}
