mod commands;
mod manifest;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use oodkit::{Error, ExperimentConfig};

/// Train and evaluate out-of-distribution detectors on synthetic benchmarks.
#[derive(Debug, Parser)]
#[command(name = "oodkit", version)]
struct Cli {
    #[command(flatten)]
    shared: Shared,

    #[command(subcommand)]
    command: Command,
}

/// Accepted both before and after the subcommand. Not declared `global`,
/// because clap would then let the later occurrences replace the earlier
/// `--set` list instead of extending it.
#[derive(Debug, Default, clap::Args)]
struct Shared {
    /// Experiment config: one `section.key = value` per line.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set train.epochs=10`. Repeatable;
    /// applied after the config file, in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the ID splits and the OOD test suites as CSV files.
    MakeData {
        #[command(flatten)]
        shared: Shared,
        /// Output directory [default: paths.data_dir, else <paths.out_dir>/data]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a classifier, with outlier exposure when oe.enabled is set.
    Train {
        #[command(flatten)]
        shared: Shared,
        /// Directory written by make-data [default: paths.data_dir]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Outlier CSV for outlier exposure [default: paths.ood_train]
        #[arg(long)]
        ood: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Training-curve CSV [default: <out>.curve.csv]
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Train the class-conditional denoiser on the ID training split.
    TrainDdpm {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Sample label-mixup outliers from a trained denoiser.
    GenOod {
        #[command(flatten)]
        shared: Shared,
        /// Denoiser checkpoint.
        #[arg(long)]
        ddpm: PathBuf,
        /// One class pair `a,b` [default: the pairs in oe.pairs]
        #[arg(long)]
        classes: Option<String>,
        /// Number of samples [default: oe.n_ood, else a quarter of the training split]
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test split and OOD sets with a trained classifier.
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// OOD set CSV; repeatable [default: every ood_*.csv in the data directory]
        #[arg(long)]
        ood: Vec<PathBuf>,
        /// Score kind: msp, energy, mahalanobis or maxcos; repeatable [default: eval.scores]
        #[arg(long)]
        score: Vec<String>,
        /// Energy temperature [default: eval.temperature]
        #[arg(long)]
        temperature: Option<f64>,
        /// Report CSV; ROC curves go to `<stem>_roc/` beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Join baseline and outlier-exposure evaluation reports.
    Report {
        #[command(flatten)]
        shared: Shared,
        /// Directory of evaluation report CSVs.
        #[arg(long)]
        results: PathBuf,
        /// Where to write the aggregate tables [default: --results]
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failures detected by the command layer itself.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Missing(String),
    Incomplete(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Missing(m) => write!(f, "missing artifact: {m}"),
            CliError::Incomplete(m) => write!(f, "report incomplete, no counterpart run for: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_MISSING: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Config(_) => EXIT_CONFIG,
                CliError::Missing(_) | CliError::Incomplete(_) => EXIT_MISSING,
            };
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Dimension { .. } | Error::InvalidInput(_) | Error::Csv(_) => EXIT_CONFIG,
                Error::NonFinite(_) | Error::Diverged { .. } | Error::Singular(_) => EXIT_NUMERIC,
                Error::Checkpoint(_) => EXIT_MISSING,
                Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
                Error::Io(_) => 1,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return EXIT_MISSING;
            }
        }
    }
    1
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Missing(p.display().to_string()).into());
            }
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o).with_context(|| format!("in --set {o}"))?;
    }
    Ok(cfg)
}

impl Command {
    fn shared(&self) -> &Shared {
        match self {
            Command::MakeData { shared, .. }
            | Command::Train { shared, .. }
            | Command::TrainDdpm { shared, .. }
            | Command::GenOod { shared, .. }
            | Command::Eval { shared, .. }
            | Command::Report { shared, .. } => shared,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let inner = cli.command.shared();
    let config = match (&cli.shared.config, &inner.config) {
        (Some(_), Some(_)) => return Err(CliError::Config("--config given twice".into()).into()),
        (a, b) => a.as_ref().or(b.as_ref()),
    };
    let overrides: Vec<String> = cli.shared.overrides.iter().chain(&inner.overrides).cloned().collect();
    let mut cfg = load_config(config.map(PathBuf::as_path), &overrides)?;
    if let Command::Eval { score, temperature, .. } = &cli.command {
        if !score.is_empty() {
            cfg.set("eval.scores", &score.join(","))?;
        }
        if let Some(t) = temperature {
            cfg.eval_temperature = *t;
        }
    }
    cfg.validate()?;
    log::debug!("effective config:\n{}", cfg.to_text());
    match &cli.command {
        Command::MakeData { out, .. } => commands::make_data(&cfg, out.as_deref()),
        Command::Train { data, ood, out, curve, .. } => commands::train(&cfg, data.as_deref(), ood.as_deref(), out, curve.as_deref()),
        Command::TrainDdpm { data, out, curve, .. } => commands::train_ddpm(&cfg, data.as_deref(), out, curve.as_deref()),
        Command::GenOod { ddpm, classes, n, data, out, .. } => commands::gen_ood(
            &cfg,
            commands::GenOodArgs {
                ddpm,
                classes: classes.as_deref(),
                n: *n,
                data: data.as_deref(),
                out,
            },
        ),
        Command::Eval { checkpoint, data, ood, out, .. } => commands::eval(&cfg, checkpoint, data.as_deref(), ood, out),
        Command::Report { results, out, .. } => commands::report(&cfg, results, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
