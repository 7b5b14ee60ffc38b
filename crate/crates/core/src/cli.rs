//! The `minent` command line: train, eval, sweep, gradcheck, report.
//!
//! Each run writes into one output directory:
//!
//! ```text
//! config.json       effective configuration (re-parses to the same value)
//! metrics.csv       one row per epoch
//! checkpoints/last  state after the latest epoch
//! checkpoints/best  state at the best held-out accuracy
//! summary.txt       loss kind, final- and best-epoch accuracy
//! ```
//!
//! `sweep` adds `sweep/` (sweep state, per-trial configs, ranking) and
//! `best_trial.txt`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{RunConfig, RunData};
use crate::data::Dataset;
use crate::error::Error;
use crate::gradcheck::{self, GradcheckOptions, SuiteReport};
use crate::metrics::{read_metrics, MetricsWriter};
use crate::sweeper::{self, SweepStore, TrainerBackend, TrialStatus};
use crate::trainer::{self, MetricsRecord, RunSummary, TrainConfig, TrainState};

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const DIVERGENCE: i32 = 4;
    pub const GRADCHECK: i32 = 5;
    pub const MISSING_ARTIFACTS: i32 = 6;
}

#[derive(Debug, Parser)]
#[command(
    name = "minent",
    version,
    about = "Entropy-regularized classification experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Top-level seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override a config field by dotted path, e.g. `train.lr_model=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and record per-epoch metrics.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; defaults to `<out>/checkpoints/last`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Hyperparameter sweep followed by an extended run of the best trial.
    Sweep(Common),
    /// Finite-difference gradient checks and decomposition identities.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        inject_bug: bool,
    },
    /// Tabulate final- and best-epoch accuracy across run directories.
    Report {
        dirs: Vec<PathBuf>,
        /// Also write the table to `<out>/report.md`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A failed subcommand, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Config(Error),
    Data(Error),
    Run(Error),
    Gradcheck(Vec<SuiteReport>),
    Missing(Vec<PathBuf>),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => exit::CONFIG,
            Failure::Data(_) => exit::DATA,
            Failure::Run(Error::Divergence { .. }) => exit::DIVERGENCE,
            Failure::Run(Error::MissingArtifact(_)) => exit::MISSING_ARTIFACTS,
            Failure::Run(Error::InvalidConfig(_)) => exit::CONFIG,
            Failure::Run(_) => exit::FAILURE,
            Failure::Gradcheck(_) => exit::GRADCHECK,
            Failure::Missing(_) => exit::MISSING_ARTIFACTS,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "configuration error: {e}"),
            Failure::Data(e) => write!(f, "data error: {e}"),
            Failure::Run(e) => write!(f, "{e}"),
            Failure::Gradcheck(failed) => {
                write!(
                    f,
                    "{} gradient-check suite(s) out of tolerance",
                    failed.len()
                )?;
                for r in failed {
                    write!(
                        f,
                        "\n  {}: replay {}",
                        r.name,
                        r.failure.as_deref().unwrap_or("{}")
                    )?;
                }
                Ok(())
            }
            Failure::Missing(paths) => {
                write!(f, "missing artifacts:")?;
                for p in paths {
                    write!(f, "\n  {}", p.display())?;
                }
                Ok(())
            }
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn run_err(e: Error) -> Failure {
    Failure::Run(e)
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => exit::OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Train(common) => {
            let cfg = resolve_config(&common)?;
            let out = require_out(&common)?;
            let summary = cmd_train(&cfg, &out)?;
            println!("{}", summary_line(&cfg, &summary));
        }
        Command::Eval { common, checkpoint } => {
            let cfg = resolve_config(&common)?;
            let out = require_out(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| out.join("checkpoints").join("last"));
            let e = cmd_eval(&cfg, &out, &ckpt)?;
            println!(
                "accuracy={:.4} mean_entropy={:.6}",
                e.accuracy, e.mean_entropy
            );
        }
        Command::Sweep(common) => {
            let cfg = resolve_config(&common)?;
            let out = require_out(&common)?;
            let summary = cmd_sweep(&cfg, &out)?;
            println!("{}", summary_line(&cfg, &summary));
        }
        Command::Gradcheck { common, inject_bug } => {
            let cfg = resolve_config(&common)?;
            let opts = GradcheckOptions {
                seed: cfg.seed,
                inject_bug,
                ..GradcheckOptions::default()
            };
            let text = cmd_gradcheck(&opts, common.out.as_deref())?;
            print!("{text}");
        }
        Command::Report { dirs, out } => {
            let table = cmd_report(&dirs)?;
            if let Some(out) = out {
                fs::create_dir_all(&out)
                    .map_err(|e| run_err(Error::io(format!("creating {}", out.display()), e)))?;
                let path = out.join("report.md");
                fs::write(&path, &table)
                    .map_err(|e| run_err(Error::io(format!("writing {}", path.display()), e)))?;
            }
            print!("{table}");
        }
    }
    Ok(())
}

fn require_out(common: &Common) -> CliResult<PathBuf> {
    common
        .out
        .clone()
        .ok_or_else(|| Failure::Config(Error::InvalidConfig("--out DIR is required".into())))
}

/// Config file (or defaults), then `--set` overrides, then `--seed`;
/// validated before anything else happens.
pub fn resolve_config(common: &Common) -> CliResult<RunConfig> {
    let base = match &common.config {
        Some(path) => RunConfig::from_file(path).map_err(Failure::Config)?,
        None => RunConfig::default(),
    };
    let mut cfg = base
        .with_overrides(&common.overrides)
        .map_err(Failure::Config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

/// `loss_kind=MIN final_accuracy=… best_accuracy=… best_epoch=…`
pub fn summary_line(cfg: &RunConfig, summary: &RunSummary) -> String {
    format!(
        "loss_kind={} final_accuracy={:.4} best_accuracy={:.4} best_epoch={}",
        cfg.train.loss_kind.name(),
        summary.final_accuracy,
        summary.best_accuracy,
        summary.best_epoch
    )
}

fn load_data(cfg: &RunConfig) -> CliResult<RunData> {
    cfg.load_data().map_err(|e| match e {
        Error::InvalidConfig(_) => Failure::Config(e),
        _ => Failure::Data(e),
    })
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| run_err(Error::io(format!("writing {}", path.display()), e)))
}

fn prepare_out(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out.join("checkpoints"))
        .map_err(|e| run_err(Error::io(format!("creating {}", out.display()), e)))?;
    write_file(&out.join("config.json"), &(cfg.to_json() + "\n"))
}

/// Train from a fresh state for `config.epochs`, writing metrics and
/// checkpoints under `out`.
fn train_recorded(
    out: &Path,
    mut state: TrainState,
    config: &TrainConfig,
    train: &Dataset,
    held_out: &Dataset,
) -> CliResult<RunSummary> {
    let mut writer = MetricsWriter::create(&out.join("metrics.csv")).map_err(run_err)?;
    let last = out.join("checkpoints").join("last");
    let best_dir = out.join("checkpoints").join("best");
    let mut best = f64::NEG_INFINITY;
    let records = trainer::train_until(
        &mut state,
        train,
        held_out,
        config,
        config.epochs,
        |s, r| {
            writer.write(r)?;
            checkpoint::save(s, &last)?;
            if r.accuracy > best {
                best = r.accuracy;
                checkpoint::save(s, &best_dir)?;
            }
            Ok(())
        },
    )
    .map_err(run_err)?;
    RunSummary::from_records(records).map_err(run_err)
}

fn write_summary(cfg: &RunConfig, out: &Path, summary: &RunSummary) -> CliResult<()> {
    let text = format!(
        "{}\nbackbone={}\nloss_function={}\nepochs={}\n",
        summary_line(cfg, summary),
        cfg.backbone,
        cfg.train.loss_kind.display_name(),
        summary.records.len()
    );
    write_file(&out.join("summary.txt"), &text)
}

/// Train on the training split, evaluating on the test split every epoch.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> CliResult<RunSummary> {
    let data = load_data(cfg)?;
    let train_cfg = cfg.train_config();
    let net = cfg.net_config(data.train.input_dim(), data.train.num_classes);
    let state = TrainState::new(net, &train_cfg).map_err(Failure::Config)?;
    prepare_out(cfg, out)?;
    let summary = train_recorded(out, state, &train_cfg, &data.train, &data.test)?;
    write_summary(cfg, out, &summary)?;
    Ok(summary)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    out: &Path,
    checkpoint_dir: &Path,
) -> CliResult<trainer::Evaluation> {
    let data = load_data(cfg)?;
    let state = checkpoint::load(checkpoint_dir).map_err(run_err)?;
    if state.net.config().input_dim != data.test.input_dim()
        || state.net.config().num_classes != data.test.num_classes
    {
        return Err(Failure::Data(Error::DataIntegrity(format!(
            "checkpoint expects {} inputs / {} classes, test data has {} / {}",
            state.net.config().input_dim,
            state.net.config().num_classes,
            data.test.input_dim(),
            data.test.num_classes
        ))));
    }
    let e = trainer::evaluate(&state.net, &data.test).map_err(run_err)?;
    fs::create_dir_all(out)
        .map_err(|err| run_err(Error::io(format!("creating {}", out.display()), err)))?;
    write_file(
        &out.join("eval.txt"),
        &format!(
            "checkpoint={}\naccuracy={:?}\nmean_entropy={:?}\n",
            checkpoint_dir.display(),
            e.accuracy,
            e.mean_entropy
        ),
    )?;
    Ok(e)
}

/// Sweep on a validation split of the training data, then retrain the best
/// configuration for `sweep.refine_epochs` on all training data, evaluated
/// on the test split.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> CliResult<RunSummary> {
    let data = load_data(cfg)?;
    let (sweep_train, sweep_val) = cfg.sweep_split(&data.train).map_err(Failure::Data)?;
    let template = cfg.run_template(data.train.input_dim(), data.train.num_classes);
    prepare_out(cfg, out)?;

    let store = SweepStore::open(&out.join("sweep")).map_err(run_err)?;
    let backend = TrainerBackend {
        template: template.clone(),
        train: &sweep_train,
        val: &sweep_val,
    };
    let outcome = sweeper::run_asha(
        &cfg.sweep.space,
        &cfg.asha_settings(),
        &backend,
        Some(&store),
    )
    .map_err(run_err)?;

    let mut ranking = String::from("rank,trial_id,status,rungs_reached,accuracy\n");
    for (i, t) in outcome.ranking.iter().enumerate() {
        let status = match t.status {
            TrialStatus::Stopped(k) => format!("stopped@{k}"),
            TrialStatus::Completed => "completed".into(),
            TrialStatus::Diverged => "diverged".into(),
            TrialStatus::Running => "running".into(),
        };
        let acc = t
            .final_accuracy()
            .map_or("nan".into(), |a| format!("{a:?}"));
        let _ = writeln!(
            ranking,
            "{},{},{status},{},{acc}",
            i + 1,
            t.trial_id,
            t.rung_accuracies.len()
        );
    }
    write_file(&out.join("sweep").join("ranking.csv"), &ranking)?;

    let best = outcome.best().ok_or_else(|| {
        run_err(Error::Divergence {
            epoch: 0,
            batch: 0,
            detail: "every sweep trial diverged".into(),
        })
    })?;
    write_file(&out.join("best_trial.txt"), &best.config.to_text())?;

    let (net, mut train_cfg) = template.apply(&best.config);
    train_cfg.epochs = cfg.sweep.refine_epochs;
    let state = TrainState::new(net, &train_cfg).map_err(run_err)?;
    let summary = train_recorded(out, state, &train_cfg, &data.train, &data.test)?;
    write_summary(cfg, out, &summary)?;
    Ok(summary)
}

pub fn cmd_gradcheck(opts: &GradcheckOptions, out: Option<&Path>) -> CliResult<String> {
    let reports = gradcheck::run_all(opts).map_err(run_err)?;
    let mut text = String::new();
    for r in &reports {
        let _ = writeln!(
            text,
            "{:<4} {:<36} instances={:<5} max_rel_error={:.3e} tolerance={:.0e}",
            if r.passed() { "ok" } else { "FAIL" },
            r.name,
            r.instances,
            r.max_error,
            r.tolerance
        );
        if let Some(f) = &r.failure {
            let _ = writeln!(text, "     replay: {f}");
        }
    }
    if let Some(out) = out {
        fs::create_dir_all(out)
            .map_err(|e| run_err(Error::io(format!("creating {}", out.display()), e)))?;
        write_file(&out.join("gradcheck.txt"), &text)?;
    }
    let failed: Vec<SuiteReport> = reports.into_iter().filter(|r| !r.passed()).collect();
    if failed.is_empty() {
        Ok(text)
    } else {
        print!("{text}");
        Err(Failure::Gradcheck(failed))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub backbone: String,
    pub loss_function: String,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
}

pub fn read_report_row(dir: &Path) -> CliResult<ReportRow> {
    let config_path = dir.join("config.json");
    let metrics_path = dir.join("metrics.csv");
    let missing: Vec<PathBuf> = [&config_path, &metrics_path]
        .into_iter()
        .filter(|p| !p.is_file())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Failure::Missing(missing));
    }
    let cfg = RunConfig::from_file(&config_path).map_err(run_err)?;
    let records: Vec<MetricsRecord> = read_metrics(&metrics_path).map_err(run_err)?;
    let summary = RunSummary::from_records(records).map_err(run_err)?;
    Ok(ReportRow {
        backbone: cfg.backbone,
        loss_function: cfg.train.loss_kind.display_name().into(),
        final_accuracy: summary.final_accuracy,
        best_accuracy: summary.best_accuracy,
    })
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let mut s = String::from(
        "| Backbone | Loss function | Final epoch accuracy | Best epoch accuracy |\n\
         |---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {:.3} | {:.3} |",
            r.backbone, r.loss_function, r.final_accuracy, r.best_accuracy
        );
    }
    s
}

/// Every missing artifact across all directories is listed before failing.
pub fn cmd_report(dirs: &[PathBuf]) -> CliResult<String> {
    if dirs.is_empty() {
        return Err(Failure::Config(Error::InvalidConfig(
            "report needs at least one run directory".into(),
        )));
    }
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for d in dirs {
        match read_report_row(d) {
            Ok(r) => rows.push(r),
            Err(Failure::Missing(m)) => missing.extend(m),
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        return Err(Failure::Missing(missing));
    }
    Ok(format_report(&rows))
}
