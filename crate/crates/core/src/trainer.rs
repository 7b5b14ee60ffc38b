//! Minibatch training of the classifier together with its loss head.
//!
//! Two parameter groups are optimized: the network weights (`lr_model`,
//! weight decay on weight matrices) and the three raw loss parameters
//! (`lr_loss_head`, never decayed). Every epoch reseeds its shuffle and
//! dropout streams from `(seed, epoch)`, so a run resumed from a checkpoint
//! continues exactly as the uninterrupted run would have.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{
    self, argmax, BaseMode, LossKind, LossParams, RegularizerMode, SmoothedTarget, WeightMode,
};
use crate::net::{NetConfig, NetState, TensorKind};
use crate::optim::{OptimizerKind, OptimizerState, StepSettings, ADAM_EPS};
use crate::seed::{self, Purpose};

/// Loss-head initialization and learnability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossHeadConfig {
    pub beta1_learnable: bool,
    pub beta1_init: f64,
    pub beta2_mode: Beta2Setting,
    pub beta2_init: f64,
    pub base_learnable: bool,
    /// Initial natural log of the base; 1.0 is base e.
    pub ln_base_init: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Beta2Setting {
    Learnable,
    Fixed,
    Disabled,
}

impl Default for LossHeadConfig {
    fn default() -> Self {
        LossHeadConfig {
            beta1_learnable: false,
            beta1_init: 1.0,
            beta2_mode: Beta2Setting::Learnable,
            beta2_init: loss::DEFAULT_BETA2_INIT,
            base_learnable: true,
            ln_base_init: 1.0,
        }
    }
}

impl LossHeadConfig {
    /// Loss parameters for `kind`. `LossKind::Ce` always gets `beta2` hard
    /// zero and base e.
    pub fn params_for(&self, kind: LossKind) -> Result<LossParams> {
        if kind == LossKind::Ce {
            return Ok(LossParams::cross_entropy());
        }
        let beta1_mode = if self.beta1_learnable {
            WeightMode::Learnable
        } else {
            WeightMode::Fixed(self.beta1_init)
        };
        let beta2_mode = match self.beta2_mode {
            Beta2Setting::Learnable => RegularizerMode::Learnable,
            Beta2Setting::Fixed => RegularizerMode::Fixed(self.beta2_init),
            Beta2Setting::Disabled => RegularizerMode::Disabled,
        };
        let base_mode = if self.base_learnable {
            BaseMode::Learnable
        } else {
            BaseMode::Fixed(self.ln_base_init)
        };
        LossParams::with_initial_values(
            beta1_mode,
            self.beta1_init,
            beta2_mode,
            self.beta2_init,
            base_mode,
            self.ln_base_init,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr_model: f64,
    /// Defaults to `0.1 * lr_model` when absent.
    pub lr_loss_head: Option<f64>,
    pub momentum: f64,
    pub adam_betas: (f64, f64),
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_kind: LossKind,
    pub epsilon_smoothing: f64,
    pub loss_head: LossHeadConfig,
    /// Taken from the run's top-level seed, never from the document.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr_model: 1e-3,
            lr_loss_head: None,
            momentum: 0.9,
            adam_betas: (0.9, 0.999),
            weight_decay: 0.0,
            batch_size: 64,
            epochs: 5,
            loss_kind: LossKind::Ce,
            epsilon_smoothing: 0.01,
            loss_head: LossHeadConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_loss_head(&self) -> f64 {
        self.lr_loss_head.unwrap_or(0.1 * self.lr_model)
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )))
            }
        };
        nonneg("lr_model", self.lr_model)?;
        nonneg("lr_loss_head", self.lr_loss_head())?;
        nonneg("weight_decay", self.weight_decay)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::config(format!(
                "adam_betas {:?} outside [0, 1)",
                self.adam_betas
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.epsilon_smoothing) {
            return Err(Error::config(format!(
                "epsilon_smoothing {} outside [0, 1)",
                self.epsilon_smoothing
            )));
        }
        let params = self.loss_head.params_for(self.loss_kind)?;
        if self.loss_kind == LossKind::Mix
            && params.regularizer_enabled()
            && self.epsilon_smoothing <= 0.0
        {
            return Err(Error::config(
                "MIX loss needs epsilon_smoothing > 0 so that log p stays finite",
            ));
        }
        Ok(())
    }

    fn step_settings(&self, lr: f64, weight_decay: f64) -> StepSettings {
        StepSettings {
            kind: self.optimizer,
            lr,
            momentum: self.momentum,
            betas: self.adam_betas,
            eps: ADAM_EPS,
            weight_decay,
        }
    }
}

/// One row of the per-epoch metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Held-out accuracy in percent.
    pub accuracy: f64,
    /// Mean prediction entropy on the held-out split, in nats.
    pub mean_entropy: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub base: f64,
    pub wall_time_s: f64,
}

impl MetricsRecord {
    /// Equality ignoring `wall_time_s`.
    pub fn same_metrics(&self, other: &MetricsRecord) -> bool {
        MetricsRecord {
            wall_time_s: 0.0,
            ..self.clone()
        } == MetricsRecord {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub net: NetState,
    pub loss: LossParams,
    pub model_opt: OptimizerState,
    pub head_opt: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(net_config: NetConfig, config: &TrainConfig) -> Result<Self> {
        let net = NetState::init(net_config)?;
        let loss = config.loss_head.params_for(config.loss_kind)?;
        Ok(Self::from_parts(net, loss))
    }

    pub fn from_parts(net: NetState, loss: LossParams) -> Self {
        let lens: Vec<usize> = net.tensors().iter().map(|t| t.len()).collect();
        TrainState {
            net,
            loss,
            model_opt: OptimizerState::new(&lens),
            head_opt: OptimizerState::new(&[1, 1, 1]),
            epoch: 0,
        }
    }
}

/// Held-out accuracy and mean prediction entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_entropy: f64,
}

const EVAL_CHUNK: usize = 1024;

/// Accuracy (percent, first-index argmax) and mean softmax entropy in nats.
pub fn evaluate(net: &NetState, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let n = dataset.len();
    let mut correct = 0usize;
    let mut entropy_sum = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let logits = net.forward_eval(dataset.images.slice(ndarray::s![start..end, ..]))?;
        for (row, label) in logits.rows().into_iter().zip(&dataset.labels[start..end]) {
            let z = row.as_slice().expect("standard layout");
            if argmax(z) == *label {
                correct += 1;
            }
            entropy_sum += loss::entropy(&loss::softmax(z)?, 1.0)?;
        }
        start = end;
    }
    Ok(Evaluation {
        accuracy: 100.0 * correct as f64 / n as f64,
        mean_entropy: entropy_sum / n as f64,
    })
}

fn epoch_rng(seed: u64, purpose: Purpose, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, purpose));
    rng.set_stream(epoch as u64);
    rng
}

/// One pass over `train` in shuffled minibatches, then evaluation on
/// `held_out`. Aborts with [`Error::Divergence`] on a non-finite loss or
/// gradient.
pub fn train_epoch(
    state: &mut TrainState,
    train: &Dataset,
    held_out: &Dataset,
    config: &TrainConfig,
) -> Result<MetricsRecord> {
    let started = Instant::now();
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if train.input_dim() != state.net.config().input_dim
        || train.num_classes != state.net.config().num_classes
    {
        return Err(Error::invalid(format!(
            "dataset ({} pixels, {} classes) does not match network ({} inputs, {} classes)",
            train.input_dim(),
            train.num_classes,
            state.net.config().input_dim,
            state.net.config().num_classes
        )));
    }
    let epoch = state.epoch + 1;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut epoch_rng(config.seed, Purpose::Shuffle, epoch));
    let mut dropout_rng = epoch_rng(config.seed, Purpose::Dropout, epoch);

    let k = train.num_classes;
    let model_settings = config.step_settings(config.lr_model, config.weight_decay);
    let head_settings = config.step_settings(config.lr_loss_head(), 0.0);
    let head_mask = state.loss.trainable_mask();
    let mut loss_sum = 0.0;

    for (batch_idx, rows) in order.chunks(config.batch_size).enumerate() {
        let diverged = |detail: String| Error::Divergence {
            epoch,
            batch: batch_idx,
            detail,
        };
        let x = train.images.select(ndarray::Axis(0), rows);
        let (logits, cache) = state.net.forward_train(x.view(), &mut dropout_rng)?;
        let scale = 1.0 / rows.len() as f64;
        let mut grad_logits = Array2::<f64>::zeros((rows.len(), k));
        let mut head_grad = [0.0; 3];
        for (r, &sample) in rows.iter().enumerate() {
            let z = logits.row(r);
            let z = z.as_slice().expect("standard layout");
            let target = SmoothedTarget::new(train.labels[sample], config.epsilon_smoothing, k)?;
            let (value, grad) =
                loss::loss_value_and_grad(config.loss_kind, z, &target, &state.loss).map_err(
                    |e| match e {
                        Error::InvalidInput(msg) => diverged(msg),
                        other => other,
                    },
                )?;
            if !value.total.is_finite() {
                return Err(diverged(format!(
                    "loss is {} for sample {sample}",
                    value.total
                )));
            }
            loss_sum += value.total;
            for (dst, g) in grad_logits.row_mut(r).iter_mut().zip(&grad.logits) {
                *dst = g * scale;
            }
            for (h, g) in head_grad.iter_mut().zip(grad.raw()) {
                *h += g * scale;
            }
        }
        let grads = state.net.backward(&cache, grad_logits.view())?;
        if !grads.is_finite() || head_grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged("non-finite gradient".into()));
        }
        let grad_tensors = grads.tensors();
        state
            .model_opt
            .apply(state.net.tensors_mut(), &grad_tensors, &model_settings)?;

        // Frozen raw parameters get a zero gradient, which leaves them
        // untouched under both optimizers.
        let masked: Vec<f64> = head_grad
            .iter()
            .zip(head_mask)
            .map(|(g, live)| if live { *g } else { 0.0 })
            .collect();
        let mut raw = state.loss.raw();
        {
            let [a, b, c] = &mut raw;
            let params = vec![
                (TensorKind::Bias, std::slice::from_mut(a)),
                (TensorKind::Bias, std::slice::from_mut(b)),
                (TensorKind::Bias, std::slice::from_mut(c)),
            ];
            let grads: Vec<&[f64]> = masked.iter().map(std::slice::from_ref).collect();
            state.head_opt.apply(params, &grads, &head_settings)?;
        }
        state.loss.set_raw(raw);
        if !state.net.is_finite() || raw.iter().any(|v| !v.is_finite()) {
            return Err(diverged("parameters became non-finite".into()));
        }
    }

    state.epoch = epoch;
    let eval = evaluate(&state.net, held_out)?;
    Ok(MetricsRecord {
        epoch,
        train_loss: loss_sum / train.len() as f64,
        accuracy: eval.accuracy,
        mean_entropy: eval.mean_entropy,
        beta1: state.loss.beta1(),
        beta2: state.loss.beta2(),
        base: state.loss.base(),
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Final- and best-epoch accuracy of a run, the two accuracy columns of the
/// report table.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub records: Vec<MetricsRecord>,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub best_epoch: usize,
}

impl RunSummary {
    pub fn from_records(records: Vec<MetricsRecord>) -> Result<Self> {
        let last = records
            .last()
            .ok_or_else(|| Error::invalid("run produced no epochs"))?;
        let final_accuracy = last.accuracy;
        let mut best = &records[0];
        for r in &records[1..] {
            if r.accuracy > best.accuracy {
                best = r;
            }
        }
        Ok(RunSummary {
            final_accuracy,
            best_accuracy: best.accuracy,
            best_epoch: best.epoch,
            records,
        })
    }
}

/// Train until `state.epoch == target_epoch`, calling `on_epoch` after each
/// epoch (for logging and checkpointing).
pub fn train_until<F>(
    state: &mut TrainState,
    train: &Dataset,
    held_out: &Dataset,
    config: &TrainConfig,
    target_epoch: usize,
    mut on_epoch: F,
) -> Result<Vec<MetricsRecord>>
where
    F: FnMut(&TrainState, &MetricsRecord) -> Result<()>,
{
    config.validate()?;
    let mut records = Vec::new();
    while state.epoch < target_epoch {
        let record = train_epoch(state, train, held_out, config)?;
        on_epoch(state, &record)?;
        records.push(record);
    }
    Ok(records)
}

/// Fresh run of `config.epochs` epochs from a new initialization.
pub fn run_training(
    net_config: NetConfig,
    config: &TrainConfig,
    train: &Dataset,
    held_out: &Dataset,
) -> Result<(TrainState, RunSummary)> {
    let mut state = TrainState::new(net_config, config)?;
    let records = train_until(
        &mut state,
        train,
        held_out,
        config,
        config.epochs,
        |_, _| Ok(()),
    )?;
    Ok((state, RunSummary::from_records(records)?))
}

/// Network config whose init seed is derived from `seed`.
pub fn net_config_for(
    input_dim: usize,
    hidden_dims: Vec<usize>,
    num_classes: usize,
    dropout_rate: f64,
    seed: u64,
) -> NetConfig {
    NetConfig {
        input_dim,
        hidden_dims,
        num_classes,
        dropout_rate,
        seed: seed::derive(seed, Purpose::Init),
    }
}
