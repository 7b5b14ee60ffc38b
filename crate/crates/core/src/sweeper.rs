//! Random hyperparameter search under an ASHA-style successive-halving
//! scheduler.
//!
//! Rung `k` has an epoch budget of `min_resource * reduction_factor^k`,
//! capped at `max_resource` (which is always the top rung). A trial that
//! finished rung `k` is promoted while it ranks in the top
//! `floor(n_k / reduction_factor)` of the `n_k` results recorded at that rung.
//! Once the population of a rung is final (every trial started, nothing still
//! running toward it) the quota is at least one, so the best trial always
//! reaches `max_resource`.
//!
//! Two execution modes share that rule:
//!
//! * rung-synchronous: every surviving trial finishes rung `k` before any
//!   promotion out of it is decided. Deterministic; used for exact oracles.
//! * asynchronous: a pool of workers asks the scheduler for the next job
//!   whenever one goes idle, as in ASHA.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::seed::{self, Purpose};
use crate::trainer::{self, MetricsRecord, RunSummary, TrainConfig, TrainState};

/// Closed interval `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub low: f64,
    pub high: f64,
}

impl Range {
    pub const fn new(low: f64, high: f64) -> Self {
        Range { low, high }
    }

    pub fn point(v: f64) -> Self {
        Range { low: v, high: v }
    }

    fn validate(&self, name: &str, log: bool) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite() && self.low <= self.high) {
            return Err(Error::config(format!("{name}: empty range {self:?}")));
        }
        if log && self.low <= 0.0 {
            return Err(Error::config(format!(
                "{name}: log-uniform range must be strictly positive, got {self:?}"
            )));
        }
        Ok(())
    }

    fn sample_uniform<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        if self.low == self.high {
            return self.low;
        }
        (self.low + u * (self.high - self.low)).clamp(self.low, self.high)
    }

    fn sample_log_uniform<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        if self.low == self.high {
            return self.low;
        }
        let (a, b) = (self.low.ln(), self.high.ln());
        (a + u * (b - a)).exp().clamp(self.low, self.high)
    }
}

/// Distributions of the swept hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    /// Uniform choice.
    pub batch_size: Vec<usize>,
    /// Log-uniform.
    pub lr_model: Range,
    /// Log-uniform.
    pub weight_decay: Range,
    /// Uniform.
    pub dropout_rate: Range,
    /// Log-uniform.
    pub epsilon_smoothing: Range,
    /// Log-uniform; `lr_loss_head = multiplier * lr_model`.
    pub lr_loss_head_multiplier: Range,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            batch_size: vec![32, 64, 128],
            lr_model: Range::new(1e-4, 3e-3),
            weight_decay: Range::new(1e-6, 1e-3),
            dropout_rate: Range::new(0.0, 0.5),
            epsilon_smoothing: Range::new(1e-3, 1e-1),
            lr_loss_head_multiplier: Range::new(0.01, 1.0),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size.is_empty() || self.batch_size.contains(&0) {
            return Err(Error::config(
                "batch_size choices must be non-empty and positive",
            ));
        }
        self.lr_model.validate("lr_model", true)?;
        self.weight_decay.validate("weight_decay", true)?;
        self.dropout_rate.validate("dropout_rate", false)?;
        if self.dropout_rate.low < 0.0 || self.dropout_rate.high >= 1.0 {
            return Err(Error::config("dropout_rate range must lie in [0, 1)"));
        }
        self.epsilon_smoothing.validate("epsilon_smoothing", true)?;
        if self.epsilon_smoothing.high >= 1.0 {
            return Err(Error::config("epsilon_smoothing range must lie below 1"));
        }
        self.lr_loss_head_multiplier
            .validate("lr_loss_head_multiplier", true)
    }
}

/// One sampled point of the search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub trial_id: usize,
    pub batch_size: usize,
    pub lr_model: f64,
    pub weight_decay: f64,
    pub dropout_rate: f64,
    pub epsilon_smoothing: f64,
    pub lr_loss_head_multiplier: f64,
}

impl TrialConfig {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "trial_id = {}", self.trial_id);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr_model = {:?}", self.lr_model);
        let _ = writeln!(s, "weight_decay = {:?}", self.weight_decay);
        let _ = writeln!(s, "dropout_rate = {:?}", self.dropout_rate);
        let _ = writeln!(s, "epsilon_smoothing = {:?}", self.epsilon_smoothing);
        let _ = writeln!(
            s,
            "lr_loss_head_multiplier = {:?}",
            self.lr_loss_head_multiplier
        );
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let map: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        fn get<T: std::str::FromStr>(map: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
            map.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::DataIntegrity(format!("trial config lacks a valid {key:?}")))
        }
        Ok(TrialConfig {
            trial_id: get(&map, "trial_id")?,
            batch_size: get(&map, "batch_size")?,
            lr_model: get(&map, "lr_model")?,
            weight_decay: get(&map, "weight_decay")?,
            dropout_rate: get(&map, "dropout_rate")?,
            epsilon_smoothing: get(&map, "epsilon_smoothing")?,
            lr_loss_head_multiplier: get(&map, "lr_loss_head_multiplier")?,
        })
    }
}

/// Deterministic function of `(seed, trial_id)`.
pub fn sample_trial(space: &SearchSpace, seed: u64, trial_id: usize) -> TrialConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, Purpose::Sweep));
    rng.set_stream(trial_id as u64);
    let batch_size = space.batch_size[rng.gen_range(0..space.batch_size.len())];
    TrialConfig {
        trial_id,
        batch_size,
        lr_model: space.lr_model.sample_log_uniform(&mut rng),
        weight_decay: space.weight_decay.sample_log_uniform(&mut rng),
        dropout_rate: space.dropout_rate.sample_uniform(&mut rng),
        epsilon_smoothing: space.epsilon_smoothing.sample_log_uniform(&mut rng),
        lr_loss_head_multiplier: space.lr_loss_head_multiplier.sample_log_uniform(&mut rng),
    }
}

/// Fixed parts of every trial's run; a [`TrialConfig`] fills in the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTemplate {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub train: TrainConfig,
}

impl RunTemplate {
    pub fn apply(&self, trial: &TrialConfig) -> (NetConfig, TrainConfig) {
        let net = trainer::net_config_for(
            self.input_dim,
            self.hidden_dims.clone(),
            self.num_classes,
            trial.dropout_rate,
            self.train.seed,
        );
        let train = TrainConfig {
            batch_size: trial.batch_size,
            lr_model: trial.lr_model,
            lr_loss_head: Some(trial.lr_model * trial.lr_loss_head_multiplier),
            weight_decay: trial.weight_decay,
            epsilon_smoothing: trial.epsilon_smoothing,
            ..self.train.clone()
        };
        (net, train)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrialStatus {
    Running,
    /// Stopped after finishing the given rung.
    Stopped(usize),
    Completed,
    Diverged,
}

impl TrialStatus {
    fn label(&self) -> String {
        match self {
            TrialStatus::Running => "running".into(),
            TrialStatus::Stopped(k) => format!("stopped@{k}"),
            TrialStatus::Completed => "completed".into(),
            TrialStatus::Diverged => "diverged".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial_id: usize,
    pub config: TrialConfig,
    /// Validation accuracy at each rung reached, lowest rung first.
    pub rung_accuracies: Vec<f64>,
    pub status: TrialStatus,
}

impl TrialResult {
    /// Index of the highest rung with a recorded accuracy.
    pub fn highest_rung(&self) -> Option<usize> {
        self.rung_accuracies.len().checked_sub(1)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.rung_accuracies.last().copied()
    }
}

/// Training backend for the scheduler. A session holds one trial's
/// in-progress state.
pub trait TrialBackend: Sync {
    type Session: Send;

    fn start(&self, trial: &TrialConfig) -> Result<Self::Session>;

    /// Continue training until `epochs` total epochs have run and return the
    /// validation accuracy there. [`Error::Divergence`] marks the trial
    /// diverged; any other error aborts the sweep.
    fn advance(&self, session: &mut Self::Session, epochs: usize) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct AshaSettings {
    pub num_trials: usize,
    pub max_resource: usize,
    pub min_resource: usize,
    pub reduction_factor: usize,
    pub seed: u64,
    /// Worker threads; asynchronous mode only.
    pub workers: usize,
    pub synchronous: bool,
}

impl Default for AshaSettings {
    fn default() -> Self {
        AshaSettings {
            num_trials: 8,
            max_resource: 4,
            min_resource: 2,
            reduction_factor: 3,
            seed: 0,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            synchronous: false,
        }
    }
}

impl AshaSettings {
    pub fn validate(&self) -> Result<()> {
        if self.num_trials == 0 {
            return Err(Error::config("num_trials must be positive"));
        }
        if self.min_resource == 0 {
            return Err(Error::config("min_resource must be at least 1"));
        }
        if self.max_resource < self.min_resource {
            return Err(Error::config("max_resource must be >= min_resource"));
        }
        if self.reduction_factor < 2 {
            return Err(Error::config("reduction_factor must be at least 2"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers must be positive"));
        }
        Ok(())
    }
}

/// Epoch budgets of every rung: `min * r^k` below `max`, then `max`.
pub fn rung_budgets(
    min_resource: usize,
    max_resource: usize,
    reduction_factor: usize,
) -> Vec<usize> {
    let mut rungs = Vec::new();
    let mut budget = min_resource;
    while budget < max_resource {
        rungs.push(budget);
        budget = budget.saturating_mul(reduction_factor);
    }
    rungs.push(max_resource);
    rungs
}

/// One promotion, with the rung's results as they stood at that moment.
#[derive(Debug, Clone, PartialEq)]
pub struct PromotionDecision {
    pub trial_id: usize,
    pub from_rung: usize,
    pub accuracy: f64,
    /// Rank among the rung's finite results at decision time (0 = best).
    pub rank: usize,
    pub quota: usize,
    /// `(trial_id, accuracy)` of every finite result at the rung then.
    pub snapshot: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AshaOutcome {
    /// Best first; diverged trials last.
    pub ranking: Vec<TrialResult>,
    pub rungs: Vec<usize>,
    /// Epochs actually trained (cached results excluded).
    pub epochs_consumed: usize,
    pub decisions: Vec<PromotionDecision>,
}

impl AshaOutcome {
    /// Trials with a recorded result at each rung.
    pub fn rung_populations(&self) -> Vec<usize> {
        (0..self.rungs.len())
            .map(|k| {
                self.ranking
                    .iter()
                    .filter(|t| t.rung_accuracies.len() > k || reached_diverged(t, k))
                    .count()
            })
            .collect()
    }

    pub fn best(&self) -> Option<&TrialResult> {
        self.ranking
            .first()
            .filter(|t| t.status != TrialStatus::Diverged)
    }
}

fn reached_diverged(t: &TrialResult, k: usize) -> bool {
    t.status == TrialStatus::Diverged && t.rung_accuracies.len() == k
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum RungOutcome {
    Accuracy(f64),
    Diverged,
}

/// Append-only `(trial, rung)` log plus per-trial config files.
pub struct SweepStore {
    dir: PathBuf,
}

pub const SWEEP_STATE_FILE: &str = "sweep_state.csv";
pub const SWEEP_STATE_HEADER: &str = "trial_id,rung,epochs,accuracy,status";

impl SweepStore {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("trials"))
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let state = dir.join(SWEEP_STATE_FILE);
        if !state.exists() {
            fs::write(&state, format!("{SWEEP_STATE_HEADER}\n"))
                .map_err(|e| Error::io(format!("creating {}", state.display()), e))?;
        }
        Ok(SweepStore {
            dir: dir.to_path_buf(),
        })
    }

    fn trial_path(&self, trial_id: usize) -> PathBuf {
        self.dir
            .join("trials")
            .join(format!("trial_{trial_id:04}.txt"))
    }

    /// Write the config file, or check that an existing one matches.
    fn record_trial(&self, trial: &TrialConfig) -> Result<()> {
        let path = self.trial_path(trial.trial_id);
        if path.exists() {
            let text = fs::read_to_string(&path)
                .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if TrialConfig::from_text(&text)? != *trial {
                return Err(Error::DataIntegrity(format!(
                    "{} was sampled from a different seed or search space",
                    path.display()
                )));
            }
            return Ok(());
        }
        fs::write(&path, trial.to_text())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    fn append(
        &self,
        trial_id: usize,
        rung: usize,
        epochs: usize,
        outcome: RungOutcome,
        last: bool,
    ) -> Result<()> {
        let (acc, status) = match outcome {
            RungOutcome::Accuracy(a) => {
                (format!("{a:?}"), if last { "completed" } else { "running" })
            }
            RungOutcome::Diverged => ("nan".into(), "diverged"),
        };
        let line = format!("{trial_id},{rung},{epochs},{acc},{status}\n");
        use std::io::Write;
        let path = self.dir.join(SWEEP_STATE_FILE);
        fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(|e| Error::io(format!("appending to {}", path.display()), e))
    }

    fn load_cache(&self) -> Result<HashMap<(usize, usize), RungOutcome>> {
        let path = self.dir.join(SWEEP_STATE_FILE);
        let mut reader = csv::Reader::from_path(&path)?;
        let mut cache = HashMap::new();
        for row in reader.records() {
            let row = row?;
            let bad = || Error::DataIntegrity(format!("malformed row in {}", path.display()));
            let trial: usize = row.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let rung: usize = row.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let status = row.get(4).ok_or_else(bad)?;
            let outcome = if status == "diverged" {
                RungOutcome::Diverged
            } else {
                RungOutcome::Accuracy(row.get(3).and_then(|v| v.parse().ok()).ok_or_else(bad)?)
            };
            cache.insert((trial, rung), outcome);
        }
        Ok(cache)
    }

    /// Rewrite the log with final statuses, one row per `(trial, rung)`.
    fn finalize(&self, ranking: &[TrialResult], rungs: &[usize]) -> Result<()> {
        let mut rows: Vec<(usize, usize, String)> = Vec::new();
        for t in ranking {
            for (k, acc) in t.rung_accuracies.iter().enumerate() {
                let last = k + 1 == t.rung_accuracies.len();
                let status = if last {
                    t.status.label()
                } else {
                    "promoted".into()
                };
                rows.push((
                    t.trial_id,
                    k,
                    format!("{},{k},{},{acc:?},{status}", t.trial_id, rungs[k]),
                ));
            }
            if t.status == TrialStatus::Diverged {
                let k = t.rung_accuracies.len();
                rows.push((
                    t.trial_id,
                    k,
                    format!("{},{k},{},nan,diverged", t.trial_id, rungs[k]),
                ));
            }
        }
        rows.sort_by_key(|r| (r.0, r.1));
        let mut text = format!("{SWEEP_STATE_HEADER}\n");
        for (_, _, line) in rows {
            text.push_str(&line);
            text.push('\n');
        }
        let path = self.dir.join(SWEEP_STATE_FILE);
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Scheduler bookkeeping shared by both execution modes.
struct Ledger {
    rungs: Vec<usize>,
    reduction_factor: usize,
    num_trials: usize,
    configs: Vec<TrialConfig>,
    /// Finished results per rung, in arrival order.
    results: Vec<Vec<(usize, RungOutcome)>>,
    promoted: Vec<Vec<bool>>,
    /// Rung each trial is currently running toward.
    in_flight: Vec<Option<usize>>,
    next_trial: usize,
    decisions: Vec<PromotionDecision>,
    epochs_consumed: usize,
    cache: HashMap<(usize, usize), RungOutcome>,
}

enum Job {
    Run { trial: usize, rung: usize },
    Wait,
    Done,
}

impl Ledger {
    fn new(
        settings: &AshaSettings,
        configs: Vec<TrialConfig>,
        cache: HashMap<(usize, usize), RungOutcome>,
    ) -> Self {
        let rungs = rung_budgets(
            settings.min_resource,
            settings.max_resource,
            settings.reduction_factor,
        );
        let n = settings.num_trials;
        Ledger {
            results: vec![Vec::new(); rungs.len()],
            promoted: vec![vec![false; n]; rungs.len()],
            rungs,
            reduction_factor: settings.reduction_factor,
            num_trials: n,
            configs,
            in_flight: vec![None; n],
            next_trial: 0,
            decisions: Vec::new(),
            epochs_consumed: 0,
            cache,
        }
    }

    /// Finite results at rung `k`, best first, ties by trial id.
    fn ranked(&self, k: usize) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self.results[k]
            .iter()
            .filter_map(|(t, o)| match o {
                RungOutcome::Accuracy(a) => Some((*t, *a)),
                RungOutcome::Diverged => None,
            })
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    /// Promote the best unpromoted trial of rung `k` if it is within `quota`.
    fn try_promote(&mut self, k: usize, quota: usize) -> Option<(usize, usize)> {
        let ranked = self.ranked(k);
        let (rank, &(trial, accuracy)) = ranked
            .iter()
            .enumerate()
            .take(quota)
            .find(|(_, (t, _))| !self.promoted[k][*t])?;
        self.promoted[k][trial] = true;
        self.decisions.push(PromotionDecision {
            trial_id: trial,
            from_rung: k,
            accuracy,
            rank,
            quota,
            snapshot: ranked,
        });
        Some((trial, k + 1))
    }

    /// Regular rule, deepest rung first: top `floor(n_k / r)`.
    fn find_promotion(&mut self) -> Option<(usize, usize)> {
        (0..self.rungs.len() - 1)
            .rev()
            .find_map(|k| self.try_promote(k, self.results[k].len() / self.reduction_factor))
    }

    /// End-game rule, shallowest rung first: once a rung's population is
    /// final and nothing below it can still promote, its quota is at least
    /// one.
    fn find_final_promotion(&mut self) -> Option<(usize, usize)> {
        if self.next_trial < self.num_trials {
            return None;
        }
        for k in 0..self.rungs.len() - 1 {
            if self.in_flight.iter().any(|r| r.is_some_and(|r| r <= k)) {
                return None;
            }
            let quota = (self.results[k].len() / self.reduction_factor).max(1);
            if let Some(p) = self.try_promote(k, quota) {
                return Some(p);
            }
        }
        None
    }

    fn next_job(&mut self) -> Job {
        let promotion = self.find_promotion().or_else(|| {
            if self.next_trial < self.num_trials {
                None
            } else {
                self.find_final_promotion()
            }
        });
        if let Some((trial, rung)) = promotion {
            self.in_flight[trial] = Some(rung);
            return Job::Run { trial, rung };
        }
        if self.next_trial < self.num_trials {
            let trial = self.next_trial;
            self.next_trial += 1;
            self.in_flight[trial] = Some(0);
            return Job::Run { trial, rung: 0 };
        }
        if self.in_flight.iter().any(Option::is_some) {
            Job::Wait
        } else {
            Job::Done
        }
    }

    fn report(&mut self, trial: usize, rung: usize, outcome: RungOutcome, trained_epochs: usize) {
        self.in_flight[trial] = None;
        self.results[rung].push((trial, outcome));
        self.epochs_consumed += trained_epochs;
    }

    fn outcome(&self) -> AshaOutcome {
        let top = self.rungs.len() - 1;
        let mut ranking: Vec<TrialResult> = (0..self.num_trials)
            .filter(|t| self.results[0].iter().any(|(id, _)| id == t))
            .map(|t| {
                let mut accs = Vec::new();
                let mut status = TrialStatus::Running;
                for k in 0..self.rungs.len() {
                    match self.results[k].iter().find(|(id, _)| *id == t) {
                        Some((_, RungOutcome::Accuracy(a))) => {
                            accs.push(*a);
                            status = if k == top {
                                TrialStatus::Completed
                            } else {
                                TrialStatus::Stopped(k)
                            };
                        }
                        Some((_, RungOutcome::Diverged)) => {
                            status = TrialStatus::Diverged;
                            break;
                        }
                        None => break,
                    }
                }
                TrialResult {
                    trial_id: t,
                    config: self.configs[t].clone(),
                    rung_accuracies: accs,
                    status,
                }
            })
            .collect();
        ranking.sort_by(|a, b| {
            let key =
                |t: &TrialResult| (t.status == TrialStatus::Diverged, t.rung_accuracies.len());
            let (da, la) = key(a);
            let (db, lb) = key(b);
            da.cmp(&db)
                .then(lb.cmp(&la))
                .then_with(|| {
                    let fa = a.final_accuracy().unwrap_or(f64::NEG_INFINITY);
                    let fb = b.final_accuracy().unwrap_or(f64::NEG_INFINITY);
                    fb.total_cmp(&fa)
                })
                .then(a.trial_id.cmp(&b.trial_id))
        });
        AshaOutcome {
            ranking,
            rungs: self.rungs.clone(),
            epochs_consumed: self.epochs_consumed,
            decisions: self.decisions.clone(),
        }
    }
}

/// Per-trial session slot; the session is created on first use.
struct Slot<S> {
    session: Option<S>,
    epochs: usize,
}

fn execute<B: TrialBackend>(
    backend: &B,
    config: &TrialConfig,
    slot: &mut Slot<B::Session>,
    budget: usize,
    cached: Option<RungOutcome>,
) -> Result<(RungOutcome, usize)> {
    if let Some(c) = cached {
        return Ok((c, 0));
    }
    let session = match &mut slot.session {
        Some(s) => s,
        None => {
            slot.epochs = 0;
            slot.session.insert(backend.start(config)?)
        }
    };
    let trained = budget.saturating_sub(slot.epochs);
    match backend.advance(session, budget) {
        Ok(acc) => {
            slot.epochs = budget;
            Ok((RungOutcome::Accuracy(acc), trained))
        }
        Err(Error::Divergence { .. }) => {
            slot.session = None;
            Ok((RungOutcome::Diverged, trained))
        }
        Err(e) => Err(e),
    }
}

/// Run the sweep. With `store`, every finished `(trial, rung)` is appended
/// to the sweep log as it happens and previously logged results are reused
/// instead of retrained.
pub fn run_asha<B: TrialBackend>(
    space: &SearchSpace,
    settings: &AshaSettings,
    backend: &B,
    store: Option<&SweepStore>,
) -> Result<AshaOutcome> {
    space.validate()?;
    settings.validate()?;
    let configs: Vec<TrialConfig> = (0..settings.num_trials)
        .map(|id| sample_trial(space, settings.seed, id))
        .collect();
    let cache = match store {
        Some(s) => {
            for c in &configs {
                s.record_trial(c)?;
            }
            s.load_cache()?
        }
        None => HashMap::new(),
    };
    let ledger = Ledger::new(settings, configs.clone(), cache);
    let slots: Vec<Mutex<Slot<B::Session>>> = (0..settings.num_trials)
        .map(|_| {
            Mutex::new(Slot {
                session: None,
                epochs: 0,
            })
        })
        .collect();

    let outcome = if settings.synchronous {
        run_synchronous(ledger, backend, &configs, &slots, store)?
    } else {
        run_asynchronous(ledger, backend, &configs, &slots, store, settings.workers)?
    };
    if let Some(s) = store {
        s.finalize(&outcome.ranking, &outcome.rungs)?;
    }
    Ok(outcome)
}

fn record(
    store: Option<&SweepStore>,
    ledger: &Ledger,
    trial: usize,
    rung: usize,
    outcome: RungOutcome,
) -> Result<()> {
    match store {
        Some(s) => s.append(
            trial,
            rung,
            ledger.rungs[rung],
            outcome,
            rung + 1 == ledger.rungs.len(),
        ),
        None => Ok(()),
    }
}

fn run_synchronous<B: TrialBackend>(
    mut ledger: Ledger,
    backend: &B,
    configs: &[TrialConfig],
    slots: &[Mutex<Slot<B::Session>>],
    store: Option<&SweepStore>,
) -> Result<AshaOutcome> {
    let mut active: Vec<usize> = (0..ledger.num_trials).collect();
    ledger.next_trial = ledger.num_trials;
    for rung in 0..ledger.rungs.len() {
        let budget = ledger.rungs[rung];
        for t in &active {
            ledger.in_flight[*t] = Some(rung);
        }
        let results: Vec<Result<(RungOutcome, usize)>> = {
            use rayon::prelude::*;
            active
                .par_iter()
                .map(|t| {
                    let mut slot = slots[*t].lock().expect("slot lock");
                    let cached = ledger.cache.get(&(*t, rung)).copied();
                    execute(backend, &configs[*t], &mut slot, budget, cached)
                })
                .collect()
        };
        for (t, r) in active.iter().zip(results) {
            let (outcome, trained) = r?;
            ledger.report(*t, rung, outcome, trained);
            if !ledger.cache.contains_key(&(*t, rung)) {
                record(store, &ledger, *t, rung, outcome)?;
            }
        }
        active.clear();
        while let Some((trial, next)) = ledger
            .find_promotion()
            .or_else(|| ledger.find_final_promotion())
        {
            debug_assert_eq!(next, rung + 1);
            ledger.in_flight[trial] = Some(next);
            active.push(trial);
        }
        active.sort_unstable();
        if active.is_empty() {
            break;
        }
    }
    Ok(ledger.outcome())
}

fn run_asynchronous<B: TrialBackend>(
    ledger: Ledger,
    backend: &B,
    configs: &[TrialConfig],
    slots: &[Mutex<Slot<B::Session>>],
    store: Option<&SweepStore>,
    workers: usize,
) -> Result<AshaOutcome> {
    struct Shared {
        ledger: Ledger,
        error: Option<Error>,
    }
    let shared = Mutex::new(Shared {
        ledger,
        error: None,
    });
    let wake = Condvar::new();

    std::thread::scope(|scope| {
        for _ in 0..workers.min(configs.len()).max(1) {
            scope.spawn(|| loop {
                let (trial, rung, budget, cached) = {
                    let mut guard = shared.lock().expect("scheduler lock");
                    loop {
                        if guard.error.is_some() {
                            return;
                        }
                        match guard.ledger.next_job() {
                            Job::Run { trial, rung } => {
                                let budget = guard.ledger.rungs[rung];
                                let cached = guard.ledger.cache.get(&(trial, rung)).copied();
                                break (trial, rung, budget, cached);
                            }
                            Job::Wait => guard = wake.wait(guard).expect("scheduler lock"),
                            Job::Done => {
                                wake.notify_all();
                                return;
                            }
                        }
                    }
                };
                let result = {
                    let mut slot = slots[trial].lock().expect("slot lock");
                    execute(backend, &configs[trial], &mut slot, budget, cached)
                };
                let mut guard = shared.lock().expect("scheduler lock");
                match result {
                    Ok((outcome, trained)) => {
                        guard.ledger.report(trial, rung, outcome, trained);
                        if cached.is_none() {
                            if let Err(e) = record(store, &guard.ledger, trial, rung, outcome) {
                                guard.error = Some(e);
                            }
                        }
                    }
                    Err(e) => {
                        guard.ledger.in_flight[trial] = None;
                        guard.error = Some(e);
                    }
                }
                wake.notify_all();
            });
        }
    });

    let shared = shared.into_inner().expect("scheduler lock");
    match shared.error {
        Some(e) => Err(e),
        None => Ok(shared.ledger.outcome()),
    }
}

/// Each trial's accuracy is a fixed score independent of epochs; a NaN
/// score makes the trial diverge.
#[derive(Debug, Clone)]
pub struct FixedScoreBackend {
    pub scores: Vec<f64>,
}

impl TrialBackend for FixedScoreBackend {
    /// `(trial_id, epochs trained)`.
    type Session = (usize, usize);

    fn start(&self, trial: &TrialConfig) -> Result<(usize, usize)> {
        if trial.trial_id >= self.scores.len() {
            return Err(Error::config(format!(
                "no score for trial {}",
                trial.trial_id
            )));
        }
        Ok((trial.trial_id, 0))
    }

    fn advance(&self, session: &mut (usize, usize), epochs: usize) -> Result<f64> {
        let score = self.scores[session.0];
        if score.is_nan() {
            return Err(Error::Divergence {
                epoch: session.1 + 1,
                batch: 0,
                detail: "fixed score is NaN".into(),
            });
        }
        session.1 = epochs;
        Ok(score)
    }
}

/// Backend that trains real networks from a [`RunTemplate`].
pub struct TrainerBackend<'a> {
    pub template: RunTemplate,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
}

pub struct TrainerSession {
    state: TrainState,
    config: TrainConfig,
}

impl TrialBackend for TrainerBackend<'_> {
    type Session = TrainerSession;

    fn start(&self, trial: &TrialConfig) -> Result<TrainerSession> {
        let (net, config) = self.template.apply(trial);
        config.validate()?;
        Ok(TrainerSession {
            state: TrainState::new(net, &config)?,
            config,
        })
    }

    fn advance(&self, session: &mut TrainerSession, epochs: usize) -> Result<f64> {
        let records = trainer::train_until(
            &mut session.state,
            self.train,
            self.val,
            &session.config,
            epochs,
            |_, _| Ok(()),
        )?;
        match records.last() {
            Some(r) => Ok(r.accuracy),
            None => Ok(trainer::evaluate(&session.state.net, self.val)?.accuracy),
        }
    }
}

/// Fresh run with `best`'s hyperparameters for `extended_epochs`, calling
/// `on_epoch` after every epoch.
pub fn refine_best<F>(
    best: &TrialConfig,
    template: &RunTemplate,
    extended_epochs: usize,
    train: &Dataset,
    held_out: &Dataset,
    on_epoch: F,
) -> Result<(TrainState, RunSummary)>
where
    F: FnMut(&TrainState, &MetricsRecord) -> Result<()>,
{
    if extended_epochs == 0 {
        return Err(Error::config("extended_epochs must be positive"));
    }
    let (net, mut config) = template.apply(best);
    config.epochs = extended_epochs;
    config.validate()?;
    let mut state = TrainState::new(net, &config)?;
    let records = trainer::train_until(
        &mut state,
        train,
        held_out,
        &config,
        extended_epochs,
        on_epoch,
    )?;
    Ok((state, RunSummary::from_records(records)?))
}
