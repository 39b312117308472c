// Negated comparisons are used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use subspace_inference::error::{Error, ErrorClass};
use subspace_inference::predict::IntervalMode;

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "subinf",
    version,
    about = "Bayesian inference for small networks in low-dimensional weight subspaces"
)]
struct Cli {
    /// Cap on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Experiment configuration shared by most subcommands.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML experiment file.
    #[arg(long, short)]
    pub config: PathBuf,

    /// Override a config value, e.g. `--set inference.temperature=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Interval {
    Gaussian,
    MixtureQuantile,
}

impl From<Interval> for IntervalMode {
    fn from(i: Interval) -> Self {
        match i {
            Interval::Gaussian => IntervalMode::Gaussian,
            Interval::MixtureQuantile => IntervalMode::MixtureQuantile,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain a network with SGD on the configured dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the averaging phase from a pretrained checkpoint, keeping the deviation buffer.
    Swa {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a random, PCA or curve subspace around an averaged checkpoint.
    Subspace {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a Bezier bend between two checkpoints and save the curve subspace.
    CurveFind {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        to: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Elliptical slice sampling in a saved subspace.
    SampleEss {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        subspace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean-field variational fit in a saved subspace, then draw samples from it.
    FitVi {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        subspace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Model-averaged predictions on a feature CSV or a 1-D grid.
    Predict {
        #[arg(long)]
        subspace: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        /// CSV whose columns are exactly the model's input features.
        #[arg(long, conflicts_with = "grid", required_unless_present = "grid")]
        input: Option<PathBuf>,
        /// `START:STOP:N` evenly spaced scalar inputs; writes a predictive-curve table.
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score model-averaged predictions against a labelled CSV.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        subspace: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "gaussian")]
        interval: Interval,
        /// Also write the metrics as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeated random-split evaluation on a CSV dataset.
    Uci {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// The gapped 1-D regression experiment: data, fit, and predictive curve.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 401)]
        grid_points: usize,
    },
    /// Trajectory variance profile and Lanczos estimates of the top Hessian eigenvalues.
    Spectrum {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Lanczos iterations; 0 skips the Hessian.
        #[arg(long, default_value_t = 10)]
        lanczos_iters: usize,
        #[arg(long, default_value_t = subspace_inference::spectrum::DEFAULT_HVP_EPS)]
        hvp_eps: f64,
    },
    /// Metrics as a function of temperature on one split, subspace held fixed.
    TempSweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated temperatures.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

fn classify(err: &anyhow::Error) -> ErrorClass {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return e.class();
        }
        if let Some(c) = cause.downcast_ref::<commands::Failed>() {
            return c.0;
        }
        if cause.is::<std::io::Error>() {
            return ErrorClass::Data;
        }
    }
    ErrorClass::Data
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
        {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(classify(&e)))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    use commands::*;
    match cli.command {
        Command::Train { cfg, out } => train(&cfg, &out),
        Command::Swa {
            cfg,
            checkpoint,
            out,
        } => swa(&cfg, &checkpoint, &out),
        Command::Subspace {
            cfg,
            checkpoint,
            out,
        } => subspace(&cfg, &checkpoint, &out),
        Command::CurveFind { cfg, from, to, out } => curve_find(&cfg, &from, &to, &out),
        Command::SampleEss { cfg, subspace, out } => sample(&cfg, &subspace, &out, Method::Ess),
        Command::FitVi { cfg, subspace, out } => sample(&cfg, &subspace, &out, Method::Vi),
        Command::Predict {
            subspace,
            samples,
            input,
            grid,
            out,
        } => predict(&subspace, &samples, input.as_deref(), grid.as_deref(), &out),
        Command::Eval {
            cfg,
            subspace,
            samples,
            data,
            interval,
            out,
        } => eval(
            &cfg,
            &subspace,
            &samples,
            &data,
            interval.into(),
            out.as_deref(),
        ),
        Command::Uci { cfg, out_dir } => uci(&cfg, &out_dir, cli.jobs),
        Command::Synth {
            cfg,
            out_dir,
            grid_points,
        } => synth(&cfg, &out_dir, grid_points),
        Command::Spectrum {
            cfg,
            checkpoint,
            out_dir,
            lanczos_iters,
            hvp_eps,
        } => spectrum(&cfg, &checkpoint, &out_dir, lanczos_iters, hvp_eps),
        Command::TempSweep { cfg, grid, out } => temp_sweep(&cfg, &grid, &out),
    }
}
