//! End-to-end experiment pipeline: train, average, build a subspace, infer,
//! predict. Also the multi-trial split protocol, temperature search and
//! sweep, and the CSV tables the command line emits.

use std::io::Write;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{
    DataSource, ExperimentConfig, InferenceConfig, Method, SubspaceConfig, TemperatureSetting,
};
use crate::data::{
    csv_err, in_data_region, in_gap_region, load_csv_table, synth_regression, RawTable,
    SynthConfig, SynthData,
};
use crate::dataset::{Dataset, Standardization};
use crate::error::{Error, ErrorClass, Result};
use crate::inference::{fit_vi, run_ess, sample_vi, SampleSet, VIPosterior};
use crate::net::{self, Architecture, ParamVector};
use crate::posterior::SubspacePosterior;
use crate::predict::{bma_predict, evaluate, IntervalMode, Metrics, PredictiveSummary};
use crate::subspace::{
    curve_subspace, find_network_curve, pca_subspace, random_subspace, CurveConfig, CurveEndpoints,
    Subspace, SubspaceKind,
};
use crate::train::{run_network_swa, train_network, DeviationBuffer};

/// Seed for one named stage of a run, independent across stages.
pub fn stage_seed(master: u64, stage: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stage);
    rng.random()
}

/// The configured dataset in raw units. Synthetic data becomes a one-feature
/// table with columns `x` and `y`.
pub fn load_table(config: &ExperimentConfig) -> Result<RawTable> {
    match config.data.source {
        DataSource::Csv => {
            let path =
                config.data.path.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("data.path is required for csv data".into())
                })?;
            load_csv_table(path, &config.data.target, config.data.task)
        }
        DataSource::Synthetic => {
            let s = synth_regression(&config.data.synthetic)?;
            Ok(RawTable {
                feature_names: vec!["x".into()],
                target_name: "y".into(),
                inputs: s.dataset.inputs().to_vec(),
                input_dim: 1,
                targets: s.dataset.targets().clone(),
            })
        }
    }
}

/// Everything produced before inference.
#[derive(Clone, Debug)]
pub struct FittedModel {
    pub arch: Architecture,
    pub pretrained: ParamVector,
    pub w_swa: ParamVector,
    pub buffer: DeviationBuffer,
    pub subspace: Subspace,
}

/// Independent seeds for each stage of one run.
#[derive(Clone, Copy, Debug)]
struct StageSeeds {
    init: u64,
    train: u64,
    swa: u64,
    subspace: u64,
}

impl StageSeeds {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            init: rng.random(),
            train: rng.random(),
            swa: rng.random(),
            subspace: rng.random(),
        }
    }

    fn from_seed(seed: u64) -> Self {
        Self::draw(&mut ChaCha8Rng::seed_from_u64(seed))
    }
}

fn train_and_average(
    config: &ExperimentConfig,
    arch: &Architecture,
    train: &Dataset,
    init_seed: u64,
    train_seed: u64,
    swa_seed: u64,
) -> Result<(ParamVector, crate::train::SwaResult)> {
    let n = train.len();
    let p0 = net::init_weights(arch, init_seed);
    let (pretrained, _) =
        train_network(arch, &p0, train, &config.train.train_config(n, train_seed))?;
    let swa = run_network_swa(
        arch,
        &pretrained,
        train,
        &config.swa.train_config(n, swa_seed),
    )?;
    Ok((pretrained, swa))
}

/// Pretrains, runs the averaging phase and builds the configured subspace.
pub fn fit_model(config: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<FittedModel> {
    let s = StageSeeds::from_seed(seed);
    let arch = config.architecture(train.input_dim())?;
    let (pretrained, swa) = train_and_average(config, &arch, train, s.init, s.train, s.swa)?;
    let subspace = build_subspace(
        config,
        &config.subspace,
        &arch,
        train,
        &swa.w_swa,
        &swa.buffer,
        s.subspace,
    )?;
    Ok(FittedModel {
        arch,
        pretrained,
        w_swa: swa.w_swa,
        buffer: swa.buffer,
        subspace,
    })
}

/// Subspace around `w_swa`. The curve kind trains a second independent
/// solution and the bend connecting the two.
pub fn build_subspace(
    config: &ExperimentConfig,
    sub: &SubspaceConfig,
    arch: &Architecture,
    train: &Dataset,
    w_swa: &ParamVector,
    buffer: &DeviationBuffer,
    seed: u64,
) -> Result<Subspace> {
    let s = match sub.kind {
        SubspaceKind::Pca => pca_subspace(buffer, w_swa.clone(), sub.rank, sub.scaling)?,
        SubspaceKind::Random => random_subspace(arch.num_weights(), sub.rank, w_swa.clone(), seed)?,
        SubspaceKind::Curve => {
            let s2 = StageSeeds::from_seed(seed);
            let (_, other) = train_and_average(config, arch, train, s2.init, s2.train, s2.swa)?;
            let n = train.len();
            let batch = config.train.batch_size_for(n);
            let curve = CurveConfig {
                num_steps: sub.curve_epochs * n.div_ceil(batch),
                learning_rate: config.train.learning_rate,
                momentum: config.train.momentum,
                weight_decay: config.train.weight_decay,
                batch_size: batch,
                seed: s2.subspace,
            };
            let w_half = find_network_curve(arch, w_swa, &other.w_swa, train, &curve)?;
            curve_subspace(&CurveEndpoints {
                w0: w_swa.clone(),
                w1: other.w_swa,
                w_half,
            })?
        }
    };
    Ok(if sub.noise_coordinate {
        s.with_noise_coordinate()
    } else {
        s
    })
}

/// Posterior samples in `subspace` at one temperature.
pub fn infer(
    inference: &InferenceConfig,
    arch: &Architecture,
    subspace: &Subspace,
    train: &Dataset,
    temperature: f64,
    seed: u64,
) -> Result<(SampleSet, Option<VIPosterior>)> {
    let target = SubspacePosterior::new(subspace, arch, train, temperature, inference.prior_std)?;
    match inference.method {
        Method::Ess => {
            let z0 = vec![0.0; subspace.dim()];
            Ok((run_ess(&target, &z0, &inference.chain_config(seed))?, None))
        }
        Method::Vi => {
            let vi = crate::inference::VIConfig {
                seed,
                ..inference.vi.clone()
            };
            let fit = fit_vi(&target, &vi)?;
            let mut samples =
                sample_vi(&fit.posterior, inference.num_samples, seed.wrapping_add(1));
            samples.rescore(&target)?;
            Ok((samples, Some(fit.posterior)))
        }
    }
}

/// Predictive summary and metrics on `test`.
pub fn predict_and_score(
    arch: &Architecture,
    subspace: &Subspace,
    samples: &SampleSet,
    test: &Dataset,
    mode: IntervalMode,
) -> Result<(PredictiveSummary, Metrics)> {
    let summary = bma_predict(arch, subspace, samples, test.inputs())?;
    let metrics = evaluate(&summary, test.targets(), test.standardization(), mode)?;
    Ok((summary, metrics))
}

/// Seeded shuffle split; returns `(train, test)` index lists, each sorted.
pub fn split_indices(
    n: usize,
    test_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// [`split_indices`] driven by its own seed.
pub fn seeded_split(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    split_indices(n, test_fraction, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Train/test datasets with the transform fitted on the training rows only.
pub fn prepare_split(
    table: &RawTable,
    train_idx: &[usize],
    test_idx: &[usize],
    standardize: bool,
) -> Result<(Dataset, Dataset)> {
    let tr = table.subset(train_idx)?;
    let te = table.subset(test_idx)?;
    let train = tr.to_dataset(standardize)?;
    let st = if standardize {
        train.standardization().clone()
    } else {
        Standardization::identity(table.input_dim)
    };
    let test = Dataset::from_raw(&te.inputs, te.input_dim, te.targets.clone(), st)?;
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureScore {
    pub temperature: f64,
    /// Mean standardized negative log-likelihood over the validation splits.
    pub mean_nll: f64,
}

/// Picks the grid temperature with the best average validation likelihood,
/// refitting the whole pipeline on each validation split of `table`.
pub fn select_temperature(
    config: &ExperimentConfig,
    table: &RawTable,
    grid: &[f64],
    validation_splits: usize,
    seed: u64,
) -> Result<(f64, Vec<TemperatureScore>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut totals = vec![0.0; grid.len()];
    for _ in 0..validation_splits {
        let (tr, va) = split_indices(table.len(), config.data.test_fraction, &mut rng);
        let (train, val) = prepare_split(table, &tr, &va, config.data.standardize)?;
        let fit_seed: u64 = rng.random();
        let infer_seed: u64 = rng.random();
        let model = fit_model(config, &train, fit_seed)?;
        let scores: Vec<f64> = grid
            .par_iter()
            .map(|&t| {
                let (samples, _) = infer(
                    &config.inference,
                    &model.arch,
                    &model.subspace,
                    &train,
                    t,
                    infer_seed,
                )?;
                let (_, m) = predict_and_score(
                    &model.arch,
                    &model.subspace,
                    &samples,
                    &val,
                    IntervalMode::Gaussian,
                )?;
                Ok(m.nll_norm)
            })
            .collect::<Result<_>>()?;
        for (a, b) in totals.iter_mut().zip(scores) {
            *a += b;
        }
    }
    let table: Vec<TemperatureScore> = grid
        .iter()
        .zip(&totals)
        .map(|(&temperature, &t)| TemperatureScore {
            temperature,
            mean_nll: t / validation_splits as f64,
        })
        .collect();
    let best = table
        .iter()
        .filter(|s| s.mean_nll.is_finite())
        .min_by(|a, b| a.mean_nll.total_cmp(&b.mean_nll))
        .ok_or_else(|| {
            Error::InvalidConfig("no temperature produced a finite validation likelihood".into())
        })?;
    Ok((best.temperature, table))
}

#[derive(Clone, Debug, Serialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub temperature: Option<f64>,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
    #[serde(skip)]
    pub error_class: Option<ErrorClass>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Aggregate {
    pub completed: usize,
    pub failed: usize,
    pub nll_norm: Option<Summary>,
    pub nll_unnorm: Option<Summary>,
    pub rmse: Option<Summary>,
    pub accuracy: Option<Summary>,
    pub coverage95: Option<Summary>,
}

impl Aggregate {
    pub fn from_trials(trials: &[TrialOutcome]) -> Self {
        let done: Vec<&Metrics> = trials.iter().filter_map(|t| t.metrics.as_ref()).collect();
        let pick = |f: &dyn Fn(&Metrics) -> Option<f64>| -> Option<Summary> {
            let v: Vec<f64> = done.iter().filter_map(|m| f(m)).collect();
            Summary::of(&v)
        };
        Self {
            completed: done.len(),
            failed: trials.len() - done.len(),
            nll_norm: pick(&|m| Some(m.nll_norm)),
            nll_unnorm: pick(&|m| Some(m.nll_unnorm)),
            rmse: pick(&|m| m.rmse),
            accuracy: pick(&|m| m.accuracy),
            coverage95: pick(&|m| m.coverage95),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProtocolReport {
    pub trials: Vec<TrialOutcome>,
    pub aggregate: Aggregate,
}

/// One seeded split of the repeated-split protocol.
pub fn run_trial(config: &ExperimentConfig, table: &RawTable, trial: usize) -> TrialOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(trial as u64);
    let (train_idx, test_idx) = split_indices(table.len(), config.data.test_fraction, &mut rng);
    let fit_seed: u64 = rng.random();
    let search_seed: u64 = rng.random();
    let infer_seed: u64 = rng.random();
    let mut temperature = None;
    let result = (|| -> Result<Metrics> {
        let (train, test) = prepare_split(table, &train_idx, &test_idx, config.data.standardize)?;
        let t = match &config.inference.temperature {
            TemperatureSetting::Fixed(t) => *t,
            TemperatureSetting::Search {
                grid,
                validation_splits,
            } => {
                let train_table = table.subset(&train_idx)?;
                let (t, scores) = select_temperature(
                    config,
                    &train_table,
                    grid,
                    *validation_splits,
                    search_seed,
                )?;
                info!("trial {trial}: temperature {t} selected from {scores:?}");
                t
            }
        };
        temperature = Some(t);
        let model = fit_model(config, &train, fit_seed)?;
        let (samples, _) = infer(
            &config.inference,
            &model.arch,
            &model.subspace,
            &train,
            t,
            infer_seed,
        )?;
        let (_, metrics) = predict_and_score(
            &model.arch,
            &model.subspace,
            &samples,
            &test,
            IntervalMode::Gaussian,
        )?;
        Ok(metrics)
    })();
    match result {
        Ok(m) => {
            info!("trial {trial}: {m:?}");
            TrialOutcome {
                trial,
                train_indices: train_idx,
                test_indices: test_idx,
                temperature,
                metrics: Some(m),
                error: None,
                error_class: None,
            }
        }
        Err(e) => {
            warn!("trial {trial} failed: {e}");
            TrialOutcome {
                trial,
                train_indices: train_idx,
                test_indices: test_idx,
                temperature,
                metrics: None,
                error: Some(e.to_string()),
                error_class: Some(e.class()),
            }
        }
    }
}

/// Runs `config.trials` splits, at most `jobs` at a time (all cores when `None`).
pub fn run_uci_protocol(
    config: &ExperimentConfig,
    table: &RawTable,
    jobs: Option<usize>,
) -> Result<ProtocolReport> {
    config.validate()?;
    let run = || -> Vec<TrialOutcome> {
        (0..config.trials)
            .into_par_iter()
            .map(|t| run_trial(config, table, t))
            .collect()
    };
    let trials = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    let aggregate = Aggregate::from_trials(&trials);
    Ok(ProtocolReport { trials, aggregate })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub temperature: f64,
    pub metrics: Metrics,
}

/// Re-runs inference at each temperature with the subspace held fixed.
pub fn temperature_sweep(
    inference: &InferenceConfig,
    model: &FittedModel,
    train: &Dataset,
    test: &Dataset,
    grid: &[f64],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::InvalidConfig(
            "temperature grid must be non-empty and positive".into(),
        ));
    }
    grid.par_iter()
        .map(|&t| {
            let (samples, _) = infer(inference, &model.arch, &model.subspace, train, t, seed)?;
            let (_, metrics) = predict_and_score(
                &model.arch,
                &model.subspace,
                &samples,
                test,
                IntervalMode::Gaussian,
            )?;
            Ok(SweepRow {
                temperature: t,
                metrics,
            })
        })
        .collect()
}

/// Output of a full run on the gapped synthetic problem.
#[derive(Clone, Debug)]
pub struct SyntheticRun {
    pub data: SynthData,
    pub train: Dataset,
    pub model: FittedModel,
    pub temperature: f64,
    pub samples: SampleSet,
    pub curve: PredictiveCurve,
}

/// Generates the synthetic data, fits the configured pipeline on all of it,
/// and evaluates the predictive on `x_grid`.
pub fn run_synthetic(config: &ExperimentConfig, x_grid: &[f64]) -> Result<SyntheticRun> {
    config.validate()?;
    let TemperatureSetting::Fixed(temperature) = config.inference.temperature else {
        return Err(Error::InvalidConfig(
            "synthetic runs need a fixed temperature".into(),
        ));
    };
    let data = synth_regression(&SynthConfig {
        seed: config.data.synthetic.seed,
        ..config.data.synthetic.clone()
    })?;
    let train = if config.data.standardize {
        Dataset::standardized(data.dataset.inputs(), 1, data.dataset.targets().clone())?
    } else {
        data.dataset.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let fit_seed: u64 = rng.random();
    let infer_seed: u64 = rng.random();
    let model = fit_model(config, &train, fit_seed)?;
    let (samples, _) = infer(
        &config.inference,
        &model.arch,
        &model.subspace,
        &train,
        temperature,
        infer_seed,
    )?;
    let curve = predictive_curve(
        &model.arch,
        &model.subspace,
        &samples,
        x_grid,
        train.standardization(),
    )?;
    Ok(SyntheticRun {
        data,
        train,
        model,
        temperature,
        samples,
        curve,
    })
}

/// Mean predictive std over grid points in the gaps and in the data clusters.
pub fn gap_and_data_std(curve: &PredictiveCurve) -> (f64, f64) {
    let mean_where = |pred: fn(f64) -> bool| {
        let v: Vec<f64> = curve
            .x
            .iter()
            .zip(&curve.std)
            .filter(|(x, _)| pred(**x))
            .map(|(_, s)| *s)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    (mean_where(in_gap_region), mean_where(in_data_region))
}

/// Predictive mean, standard deviation and per-sample mean functions on a grid
/// of scalar inputs (raw units).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveCurve {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `[sample][grid point]`.
    pub trajectories: Vec<Vec<f64>>,
}

pub fn predictive_curve(
    arch: &Architecture,
    subspace: &Subspace,
    samples: &SampleSet,
    x_grid: &[f64],
    standardization: &Standardization,
) -> Result<PredictiveCurve> {
    if arch.input_dim != 1 || !arch.is_regression() {
        return Err(Error::InvalidConfig(
            "predictive curves need a scalar-input regression model".into(),
        ));
    }
    if x_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("x grid must be sorted".into()));
    }
    let inputs: Vec<f64> = x_grid
        .iter()
        .map(|&x| standardization.transform_input(&[x])[0])
        .collect();
    let summary = bma_predict(arch, subspace, samples, &inputs)?;
    let r = summary.regression().expect("regression head");
    let st = standardization;
    Ok(PredictiveCurve {
        x: x_grid.to_vec(),
        mean: r.mean.iter().map(|&m| st.restore_target(m)).collect(),
        std: r
            .variance
            .iter()
            .map(|v| v.sqrt() * st.target_std)
            .collect(),
        trajectories: r
            .component_means
            .iter()
            .map(|row| row.iter().map(|&m| st.restore_target(m)).collect())
            .collect(),
    })
}

pub fn write_predictive_curve<W: Write>(writer: W, curve: &PredictiveCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["x".to_string(), "mean".to_string(), "std".to_string()];
    header.extend((0..curve.trajectories.len()).map(|j| format!("sample_{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..curve.x.len() {
        let mut row = vec![
            curve.x[i].to_string(),
            curve.mean[i].to_string(),
            curve.std[i].to_string(),
        ];
        row.extend(curve.trajectories.iter().map(|t| t[i].to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const METRICS_HEADER: [&str; 7] = [
    "trial",
    "nll_norm",
    "nll_unnorm",
    "rmse",
    "accuracy",
    "coverage95",
    "temperature",
];

pub fn write_metrics_csv<W: Write>(writer: W, trials: &[TrialOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for t in trials {
        let Some(m) = &t.metrics else { continue };
        w.write_record([
            t.trial.to_string(),
            m.nll_norm.to_string(),
            m.nll_unnorm.to_string(),
            opt(m.rmse),
            opt(m.accuracy),
            opt(m.coverage95),
            opt(t.temperature),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(writer: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "temperature",
        "nll_norm",
        "nll_unnorm",
        "rmse",
        "accuracy",
        "coverage95",
    ])
    .map_err(csv_err)?;
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.temperature.to_string(),
            m.nll_norm.to_string(),
            m.nll_unnorm.to_string(),
            opt(m.rmse),
            opt(m.accuracy),
            opt(m.coverage95),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Two-column `(index, value)` table, used for spectra.
pub fn write_indexed_csv<W: Write>(writer: W, value_name: &str, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["index", value_name]).map_err(csv_err)?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
