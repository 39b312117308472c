use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use log::info;
use serde_json::{json, Map, Value};
use subspace_inference::config::{DataSource, ExperimentConfig, TemperatureSetting};
use subspace_inference::data::{load_csv_table, read_csv_features, write_csv_dataset, RawTable};
use subspace_inference::dataset::{Dataset, Standardization};
use subspace_inference::error::{Error, ErrorClass};
use subspace_inference::io::{Checkpoint, SamplesFile, SubspaceFile};
use subspace_inference::net::{self, Architecture};
use subspace_inference::predict::{bma_predict, IntervalMode, PredictiveSummary};
use subspace_inference::protocol::{
    build_subspace, fit_model, gap_and_data_std, infer, load_table, predict_and_score,
    predictive_curve, prepare_split, run_synthetic, run_uci_protocol, seeded_split, stage_seed,
    temperature_sweep, write_indexed_csv, write_metrics_csv, write_predictive_curve,
    write_sweep_csv,
};
use subspace_inference::spectrum::{lanczos, network_hvp, trajectory_spectrum, SpectrumReport};
use subspace_inference::subspace::{
    curve_subspace, find_network_curve, CurveConfig, CurveEndpoints, SubspaceKind,
};
use subspace_inference::train::{run_network_swa, train_network, DeviationBuffer};

pub use subspace_inference::config::Method;

use crate::ConfigArgs;

/// A failure with a known exit class but no underlying library error.
#[derive(Debug)]
pub struct Failed(pub ErrorClass);

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?} failure", self.0)
    }
}

impl std::error::Error for Failed {}

// Stage indices for `stage_seed`, so each command draws from its own stream.
const INIT: u64 = 0;
const TRAIN: u64 = 1;
const SWA: u64 = 2;
const SUBSPACE: u64 = 3;
const INFER: u64 = 4;
const LANCZOS: u64 = 5;
const FIT: u64 = 6;
const SPLIT: u64 = 7;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidConfig(msg.into()).into()
}

/// Loads the config; a relative `data.path` is taken relative to the config file.
fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config, &args.overrides)
        .with_context(|| format!("loading config {}", args.config.display()))?;
    if let (Some(p), Some(dir)) = (&cfg.data.path, args.config.parent()) {
        if p.is_relative() {
            cfg.data.path = Some(dir.join(p));
        }
    }
    Ok(cfg)
}

/// Provenance stored in every output file.
fn provenance(cfg: &ExperimentConfig) -> Result<Map<String, Value>> {
    let mut m = Map::new();
    m.insert("config".into(), json!(cfg.to_toml_string()?));
    match cfg.data.source {
        DataSource::Csv => {
            m.insert("data".into(), json!(cfg.data.path));
        }
        DataSource::Synthetic => {
            m.insert("data".into(), json!("synthetic"));
            m.insert(
                "synthetic_noise_std".into(),
                json!(cfg.data.synthetic.noise_std),
            );
            m.insert("synthetic_seed".into(), json!(cfg.data.synthetic.seed));
        }
    }
    Ok(m)
}

/// The configured dataset, transformed with `st` when given, otherwise with
/// its own statistics (if the config asks for standardization).
fn training_data(cfg: &ExperimentConfig, st: Option<&Standardization>) -> Result<Dataset> {
    let table = table(cfg)?;
    let data = match st {
        Some(st) => Dataset::from_raw(&table.inputs, table.input_dim, table.targets, st.clone())?,
        None => table.to_dataset(cfg.data.standardize)?,
    };
    Ok(data)
}

fn table(cfg: &ExperimentConfig) -> Result<RawTable> {
    load_table(cfg).with_context(|| match &cfg.data.path {
        Some(p) if cfg.data.source == DataSource::Csv => {
            format!("loading data from {}", p.display())
        }
        _ => "generating synthetic data".to_string(),
    })
}

fn check_input_dim(arch: &Architecture, data: &Dataset) -> Result<()> {
    if arch.input_dim != data.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "input features",
            expected: arch.input_dim,
            actual: data.input_dim(),
        }
        .into());
    }
    Ok(())
}

fn fixed_temperature(cfg: &ExperimentConfig) -> Result<f64> {
    match cfg.inference.temperature {
        TemperatureSetting::Fixed(t) => Ok(t),
        TemperatureSetting::Search { .. } => Err(usage(
            "this command needs a fixed inference.temperature; temperature search runs only inside `uci`",
        )),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn train(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let data = training_data(&cfg, None)?;
    let arch = cfg.architecture(data.input_dim())?;
    let p0 = net::init_weights(&arch, stage_seed(cfg.seed, INIT));
    let tc = cfg
        .train
        .train_config(data.len(), stage_seed(cfg.seed, TRAIN));
    let (params, trace) = train_network(&arch, &p0, &data, &tc)?;
    if let Some(last) = trace.last() {
        info!(
            "trained {} steps, final batch loss {:.5}",
            last.step, last.loss
        );
    }
    let mut ckpt = Checkpoint::new(arch, params, cfg.seed, tc.num_steps);
    ckpt.standardization = Some(data.standardization().clone());
    ckpt.extra = provenance(&cfg)?;
    ckpt.save(out)?;
    info!("wrote {}", out.display());
    Ok(())
}

pub fn swa(args: &ConfigArgs, checkpoint: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let pre = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let data = training_data(&cfg, pre.standardization.as_ref())?;
    check_input_dim(&pre.arch, &data)?;
    let tc = cfg.swa.train_config(data.len(), stage_seed(cfg.seed, SWA));
    let r = run_network_swa(&pre.arch, &pre.params, &data, &tc)?;
    info!(
        "averaged {} snapshots, kept {} deviation columns",
        r.buffer.n_captured(),
        r.buffer.num_columns()
    );
    let mut ckpt = Checkpoint::new(pre.arch, r.w_swa, cfg.seed, pre.steps + tc.num_steps);
    ckpt.standardization = pre.standardization;
    ckpt.deviations = Some(r.buffer);
    ckpt.extra = provenance(&cfg)?;
    ckpt.save(out)?;
    info!("wrote {}", out.display());
    Ok(())
}

pub fn subspace(args: &ConfigArgs, checkpoint: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let ckpt = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let buffer = match (&ckpt.deviations, cfg.subspace.kind) {
        (Some(b), _) => b.clone(),
        (None, SubspaceKind::Pca) => {
            return Err(usage(
                "a pca subspace needs a checkpoint written by `subinf swa`",
            ));
        }
        (None, _) => DeviationBuffer::new(cfg.swa.max_deviation_cols),
    };
    let data = training_data(&cfg, ckpt.standardization.as_ref())?;
    check_input_dim(&ckpt.arch, &data)?;
    let sub = build_subspace(
        &cfg,
        &cfg.subspace,
        &ckpt.arch,
        &data,
        &ckpt.params,
        &buffer,
        stage_seed(cfg.seed, SUBSPACE),
    )?;
    info!("{:?} subspace of dimension {}", sub.kind(), sub.dim());
    SubspaceFile {
        arch: ckpt.arch,
        subspace: sub,
        standardization: ckpt.standardization,
        extra: provenance(&cfg)?,
    }
    .save(out)?;
    info!("wrote {}", out.display());
    Ok(())
}

pub fn curve_find(args: &ConfigArgs, from: &Path, to: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let a = Checkpoint::load(from).with_context(|| format!("loading {}", from.display()))?;
    let b = Checkpoint::load(to).with_context(|| format!("loading {}", to.display()))?;
    if a.arch != b.arch {
        return Err(usage("curve endpoints must share one architecture"));
    }
    let data = training_data(&cfg, a.standardization.as_ref())?;
    check_input_dim(&a.arch, &data)?;
    let batch = cfg.train.batch_size_for(data.len());
    let curve = CurveConfig {
        num_steps: cfg.subspace.curve_epochs * data.len().div_ceil(batch),
        learning_rate: cfg.train.learning_rate,
        momentum: cfg.train.momentum,
        weight_decay: cfg.train.weight_decay,
        batch_size: batch,
        seed: stage_seed(cfg.seed, SUBSPACE),
    };
    let w_half = find_network_curve(&a.arch, &a.params, &b.params, &data, &curve)?;
    let mut sub = curve_subspace(&CurveEndpoints {
        w0: a.params,
        w1: b.params,
        w_half,
    })?;
    if cfg.subspace.noise_coordinate {
        sub = sub.with_noise_coordinate();
    }
    SubspaceFile {
        arch: a.arch,
        subspace: sub,
        standardization: a.standardization,
        extra: provenance(&cfg)?,
    }
    .save(out)?;
    info!("wrote {}", out.display());
    Ok(())
}

pub fn sample(args: &ConfigArgs, subspace: &Path, out: &Path, method: Method) -> Result<()> {
    let mut cfg = load_config(args)?;
    cfg.inference.method = method;
    let t = fixed_temperature(&cfg)?;
    let sf =
        SubspaceFile::load(subspace).with_context(|| format!("loading {}", subspace.display()))?;
    let data = training_data(&cfg, sf.standardization.as_ref())?;
    check_input_dim(&sf.arch, &data)?;
    let (samples, variational) = infer(
        &cfg.inference,
        &sf.arch,
        &sf.subspace,
        &data,
        t,
        stage_seed(cfg.seed, INFER),
    )?;
    info!(
        "{} draws in {} dimensions at temperature {t}",
        samples.len(),
        samples.dim()
    );
    SamplesFile {
        samples,
        temperature: t,
        prior_std: cfg.inference.prior_std,
        variational,
        extra: provenance(&cfg)?,
    }
    .save(out)?;
    info!("wrote {}", out.display());
    Ok(())
}

/// Parses `START:STOP:N`.
fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [a, b, n] = parts.as_slice() else {
        return Err(usage(format!(
            "grid must look like START:STOP:N, got {spec:?}"
        )));
    };
    let (a, b): (f64, f64) = (
        a.parse()
            .map_err(|_| usage(format!("bad grid start {a:?}")))?,
        b.parse()
            .map_err(|_| usage(format!("bad grid stop {b:?}")))?,
    );
    let n: usize = n
        .parse()
        .map_err(|_| usage(format!("bad grid size {n:?}")))?;
    if n < 2 || !(b > a) {
        return Err(usage("grid needs STOP > START and N >= 2"));
    }
    Ok((0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect())
}

pub fn predict(
    subspace: &Path,
    samples: &Path,
    input: Option<&Path>,
    grid: Option<&str>,
    out: &Path,
) -> Result<()> {
    let sf =
        SubspaceFile::load(subspace).with_context(|| format!("loading {}", subspace.display()))?;
    let draws =
        SamplesFile::load(samples).with_context(|| format!("loading {}", samples.display()))?;
    let st = sf
        .standardization
        .clone()
        .unwrap_or_else(|| Standardization::identity(sf.arch.input_dim));
    if let Some(g) = grid {
        let xs = parse_grid(g)?;
        let curve = predictive_curve(&sf.arch, &sf.subspace, &draws.samples, &xs, &st)?;
        write_predictive_curve(create(out)?, &curve)?;
        info!("wrote {}", out.display());
        return Ok(());
    }
    let path = input.ok_or_else(|| usage("predict needs --input or --grid"))?;
    let (header, raw, ncol) = read_csv_features(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    )?;
    if ncol != sf.arch.input_dim {
        return Err(Error::DimensionMismatch {
            what: "input features",
            expected: sf.arch.input_dim,
            actual: ncol,
        })
        .with_context(|| format!("{} has columns {header:?}", path.display()));
    }
    let inputs: Vec<f64> = raw
        .chunks(ncol)
        .flat_map(|row| st.transform_input(row))
        .collect();
    let summary = bma_predict(&sf.arch, &sf.subspace, &draws.samples, &inputs)?;
    let mut w = csv::Writer::from_writer(create(out)?);
    match &summary {
        PredictiveSummary::Regression(r) => {
            w.write_record(["row", "mean", "std"])?;
            for i in 0..r.mean.len() {
                w.write_record([
                    i.to_string(),
                    st.restore_target(r.mean[i]).to_string(),
                    (r.variance[i].sqrt() * st.target_std).to_string(),
                ])?;
            }
        }
        PredictiveSummary::Classification { probabilities } => {
            let k = probabilities.first().map_or(0, Vec::len);
            let mut head = vec!["row".to_string()];
            head.extend((0..k).map(|c| format!("p_{c}")));
            w.write_record(&head)?;
            for (i, p) in probabilities.iter().enumerate() {
                let mut row = vec![i.to_string()];
                row.extend(p.iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    info!("wrote {}", out.display());
    Ok(())
}

pub fn eval(
    args: &ConfigArgs,
    subspace: &Path,
    samples: &Path,
    data: &Path,
    mode: IntervalMode,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(args)?;
    let sf =
        SubspaceFile::load(subspace).with_context(|| format!("loading {}", subspace.display()))?;
    let draws =
        SamplesFile::load(samples).with_context(|| format!("loading {}", samples.display()))?;
    let table = load_csv_table(data, &cfg.data.target, cfg.data.task)
        .with_context(|| format!("reading {}", data.display()))?;
    let st = sf
        .standardization
        .clone()
        .unwrap_or_else(|| Standardization::identity(table.input_dim));
    let test = Dataset::from_raw(&table.inputs, table.input_dim, table.targets, st)?;
    check_input_dim(&sf.arch, &test)?;
    let (_, metrics) = predict_and_score(&sf.arch, &sf.subspace, &draws.samples, &test, mode)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    if let Some(path) = out {
        write_json(path, &serde_json::to_value(&metrics)?)?;
    }
    Ok(())
}

pub fn uci(args: &ConfigArgs, out_dir: &Path, jobs: Option<usize>) -> Result<()> {
    let cfg = load_config(args)?;
    let table = table(&cfg)?;
    info!(
        "{} rows, {} features, {} trials",
        table.len(),
        table.input_dim,
        cfg.trials
    );
    let report = run_uci_protocol(&cfg, &table, jobs)?;
    create_dir(out_dir)?;
    write_metrics_csv(create(&out_dir.join("metrics.csv"))?, &report.trials)?;
    write_json(
        &out_dir.join("report.json"),
        &json!({"meta": provenance(&cfg)?, "report": report}),
    )?;
    let agg = &report.aggregate;
    println!(
        "completed {} of {} trials",
        agg.completed,
        report.trials.len()
    );
    for (name, s) in [
        (
            "test log-likelihood",
            agg.nll_unnorm.as_ref().map(|s| (-s.mean, s.std)),
        ),
        ("rmse", agg.rmse.as_ref().map(|s| (s.mean, s.std))),
        ("accuracy", agg.accuracy.as_ref().map(|s| (s.mean, s.std))),
        (
            "coverage95",
            agg.coverage95.as_ref().map(|s| (s.mean, s.std)),
        ),
    ] {
        if let Some((m, sd)) = s {
            println!("{name}: {m:.4} +- {sd:.4}");
        }
    }
    if agg.completed == 0 {
        let class = report
            .trials
            .iter()
            .find_map(|t| t.error_class)
            .unwrap_or(ErrorClass::Numerical);
        let first = report
            .trials
            .iter()
            .find_map(|t| t.error.clone())
            .unwrap_or_default();
        return Err(anyhow::Error::new(Failed(class))
            .context(format!("every trial failed; first error: {first}")));
    }
    Ok(())
}

pub fn synth(args: &ConfigArgs, out_dir: &Path, grid_points: usize) -> Result<()> {
    let cfg = load_config(args)?;
    if cfg.data.source != DataSource::Synthetic {
        return Err(usage("synth needs data.source = \"synthetic\""));
    }
    if grid_points < 2 {
        return Err(usage("--grid-points must be at least 2"));
    }
    let grid: Vec<f64> = (0..grid_points)
        .map(|i| -10.0 + 20.0 * i as f64 / (grid_points - 1) as f64)
        .collect();
    let run = run_synthetic(&cfg, &grid)?;
    create_dir(out_dir)?;
    write_csv_dataset(
        create(&out_dir.join("data.csv"))?,
        &run.data.dataset,
        &["x".into()],
        "y",
    )?;
    write_predictive_curve(create(&out_dir.join("curve.csv"))?, &run.curve)?;
    let meta = provenance(&cfg)?;
    SubspaceFile {
        arch: run.model.arch.clone(),
        subspace: run.model.subspace.clone(),
        standardization: Some(run.train.standardization().clone()),
        extra: meta.clone(),
    }
    .save(&out_dir.join("subspace.json"))?;
    SamplesFile {
        samples: run.samples.clone(),
        temperature: run.temperature,
        prior_std: cfg.inference.prior_std,
        variational: None,
        extra: meta.clone(),
    }
    .save(&out_dir.join("samples.json"))?;
    let (gap, inside) = gap_and_data_std(&run.curve);
    write_json(
        &out_dir.join("summary.json"),
        &json!({
            "meta": meta,
            "gap_std": gap,
            "data_std": inside,
            "gap_to_data_ratio": gap / inside,
            "temperature": run.temperature,
            "num_samples": run.samples.len(),
        }),
    )?;
    println!(
        "mean predictive std: gaps {gap:.4}, data {inside:.4}, ratio {:.3}",
        gap / inside
    );
    Ok(())
}

pub fn spectrum(
    args: &ConfigArgs,
    checkpoint: &Path,
    out_dir: &Path,
    iters: usize,
    eps: f64,
) -> Result<()> {
    let cfg = load_config(args)?;
    let ckpt = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    if ckpt.deviations.is_none() && iters == 0 {
        return Err(usage(
            "nothing to do: the checkpoint has no deviation buffer and --lanczos-iters is 0",
        ));
    }
    create_dir(out_dir)?;
    let mut report = SpectrumReport::default();
    if let Some(buf) = &ckpt.deviations {
        report.explained_variance = trajectory_spectrum(buf)?;
        write_indexed_csv(
            create(&out_dir.join("trajectory.csv"))?,
            "fraction",
            &report.explained_variance,
        )?;
        let top: f64 = report.explained_variance.iter().take(5).sum();
        println!("top-5 trajectory variance fraction: {top:.4}");
    }
    if iters > 0 {
        let data = training_data(&cfg, ckpt.standardization.as_ref())?;
        check_input_dim(&ckpt.arch, &data)?;
        let (arch, params) = (&ckpt.arch, &ckpt.params);
        report.eigenvalue_estimates = lanczos(
            |v| network_hvp(arch, params, &data, v, eps),
            arch.num_weights(),
            iters.min(arch.num_weights()),
            stage_seed(cfg.seed, LANCZOS),
        )?;
        write_indexed_csv(
            create(&out_dir.join("hessian.csv"))?,
            "eigenvalue",
            &report.eigenvalue_estimates,
        )?;
        println!(
            "top Hessian eigenvalue estimates: {:?}",
            &report.eigenvalue_estimates[..report.eigenvalue_estimates.len().min(5)]
        );
    }
    write_json(
        &out_dir.join("spectrum.json"),
        &json!({"meta": provenance(&cfg)?, "spectrum": report}),
    )?;
    Ok(())
}

pub fn temp_sweep(args: &ConfigArgs, grid: &[f64], out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0)) {
        return Err(usage("--grid must hold positive temperatures"));
    }
    let table = table(&cfg)?;
    let (tr, te) = seeded_split(
        table.len(),
        cfg.data.test_fraction,
        stage_seed(cfg.seed, SPLIT),
    );
    let (train, test) = prepare_split(&table, &tr, &te, cfg.data.standardize)?;
    let model = fit_model(&cfg, &train, stage_seed(cfg.seed, FIT))?;
    let rows = temperature_sweep(
        &cfg.inference,
        &model,
        &train,
        &test,
        grid,
        stage_seed(cfg.seed, INFER),
    )?;
    for r in &rows {
        println!(
            "T = {:<10} nll_unnorm {:.4}",
            r.temperature, r.metrics.nll_unnorm
        );
    }
    write_sweep_csv(create(out)?, &rows)?;
    info!("wrote {}", out.display());
    Ok(())
}
