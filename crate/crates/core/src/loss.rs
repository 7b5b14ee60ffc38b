//! Loss kernel: cross entropy, swapped cross entropy, entropy, KL divergence,
//! and the MIX-ENT / MIN-ENT combinations with their analytic gradients.
//!
//! All quantities are computed in nats and then divided by `ln b`, the natural
//! log of the (possibly learnable) logarithm base. Sums run in ascending class
//! order so results are bit-reproducible.
//!
//! The weights and base are stored as unconstrained raw parameters and mapped
//! through softplus:
//!
//! ```text
//! beta1 = softplus(theta_beta1)     (or a fixed constant)
//! beta2 = softplus(theta_beta2)     (or a fixed constant, or hard zero)
//! ln b  = softplus(theta_base)      (or a fixed constant)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities before they enter a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Absolute tolerance on `sum(p) == 1` for a [`ProbVector`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`: `ln(e^y - 1)`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Logistic function, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A discrete distribution over `K >= 2` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid(format!(
                "distribution needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(Error::invalid(format!("probability {i} is {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {sum}")));
        }
        Ok(ProbVector(probs))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid("distribution needs at least 2 classes"));
        }
        Ok(ProbVector(vec![1.0 / k as f64; k]))
    }

    pub fn one_hot(k: usize, index: usize) -> Result<Self> {
        SmoothedTarget::new(index, 0.0, k).map(|t| t.materialize())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability, first index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// First index of the maximum element.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// A label-smoothed one-hot target: `(1 - eps) + eps/K` on the true class and
/// `eps/K` elsewhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedTarget {
    class_index: usize,
    epsilon: f64,
    num_classes: usize,
}

impl SmoothedTarget {
    pub fn new(class_index: usize, epsilon: f64, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("target needs at least 2 classes"));
        }
        if class_index >= num_classes {
            return Err(Error::invalid(format!(
                "class index {class_index} out of range for {num_classes} classes"
            )));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::invalid(format!(
                "smoothing epsilon {epsilon} outside [0, 1)"
            )));
        }
        Ok(SmoothedTarget {
            class_index,
            epsilon,
            num_classes,
        })
    }

    pub fn class_index(&self) -> usize {
        self.class_index
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn value_at(&self, i: usize) -> f64 {
        let off = self.epsilon / self.num_classes as f64;
        if i == self.class_index {
            (1.0 - self.epsilon) + off
        } else {
            off
        }
    }

    pub fn materialize(&self) -> ProbVector {
        ProbVector((0..self.num_classes).map(|i| self.value_at(i)).collect())
    }
}

/// A target distribution over classes, either smoothed one-hot labels or an
/// arbitrary [`ProbVector`].
pub trait Target {
    fn num_classes(&self) -> usize;
    fn value_at(&self, i: usize) -> f64;

    /// True when every class has positive mass, so `ln target` is finite.
    fn has_full_support(&self) -> bool {
        (0..self.num_classes()).all(|i| self.value_at(i) > 0.0)
    }
}

impl Target for SmoothedTarget {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn value_at(&self, i: usize) -> f64 {
        SmoothedTarget::value_at(self, i)
    }

    fn has_full_support(&self) -> bool {
        self.epsilon > 0.0
    }
}

impl Target for ProbVector {
    fn num_classes(&self) -> usize {
        self.len()
    }

    fn value_at(&self, i: usize) -> f64 {
        self.0[i]
    }
}

/// How the cross-entropy weight `beta1` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Fixed(f64),
    Learnable,
}

/// How the regularizer weight `beta2` is obtained. `Disabled` is an exact
/// zero, which softplus can never produce.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerMode {
    Disabled,
    Fixed(f64),
    Learnable,
}

/// How `ln b` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseMode {
    /// Fixed natural log of the base; `Fixed(1.0)` is base e.
    Fixed(f64),
    Learnable,
}

/// Raw, unconstrained loss-head parameters together with the modes that
/// decide which of them are live.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub theta_beta1: f64,
    pub theta_beta2: f64,
    pub theta_base: f64,
    pub beta1_mode: WeightMode,
    pub beta2_mode: RegularizerMode,
    pub base_mode: BaseMode,
}

/// Default initial regularizer weight when `beta2` is learnable.
pub const DEFAULT_BETA2_INIT: f64 = 0.1;

impl Default for LossParams {
    /// `beta1` fixed at 1, learnable `beta2` starting at
    /// [`DEFAULT_BETA2_INIT`], learnable base starting at e.
    fn default() -> Self {
        LossParams {
            theta_beta1: softplus_inverse(1.0),
            theta_beta2: softplus_inverse(DEFAULT_BETA2_INIT),
            theta_base: softplus_inverse(1.0),
            beta1_mode: WeightMode::Fixed(1.0),
            beta2_mode: RegularizerMode::Learnable,
            base_mode: BaseMode::Learnable,
        }
    }
}

impl LossParams {
    /// Plain cross entropy: `beta1 = 1`, `beta2` hard zero, base e.
    pub fn cross_entropy() -> Self {
        LossParams {
            beta2_mode: RegularizerMode::Disabled,
            base_mode: BaseMode::Fixed(1.0),
            ..LossParams::default()
        }
    }

    /// Build parameters whose constrained values start at the given points.
    pub fn with_initial_values(
        beta1_mode: WeightMode,
        beta1_init: f64,
        beta2_mode: RegularizerMode,
        beta2_init: f64,
        base_mode: BaseMode,
        ln_base_init: f64,
    ) -> Result<Self> {
        for (name, v) in [
            ("beta1_init", beta1_init),
            ("beta2_init", beta2_init),
            ("ln_base_init", ln_base_init),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if let WeightMode::Fixed(v) = beta1_mode {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("fixed beta1 must be >= 0, got {v}")));
            }
        }
        if let RegularizerMode::Fixed(v) = beta2_mode {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("fixed beta2 must be >= 0, got {v}")));
            }
        }
        if let BaseMode::Fixed(v) = base_mode {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!(
                    "fixed ln(base) must be > 0, got {v}"
                )));
            }
        }
        Ok(LossParams {
            theta_beta1: softplus_inverse(beta1_init),
            theta_beta2: softplus_inverse(beta2_init),
            theta_base: softplus_inverse(ln_base_init),
            beta1_mode,
            beta2_mode,
            base_mode,
        })
    }

    pub fn beta1(&self) -> f64 {
        match self.beta1_mode {
            WeightMode::Fixed(v) => v,
            WeightMode::Learnable => softplus(self.theta_beta1),
        }
    }

    pub fn beta2(&self) -> f64 {
        match self.beta2_mode {
            RegularizerMode::Disabled => 0.0,
            RegularizerMode::Fixed(v) => v,
            RegularizerMode::Learnable => softplus(self.theta_beta2),
        }
    }

    pub fn ln_base(&self) -> f64 {
        match self.base_mode {
            BaseMode::Fixed(v) => v,
            BaseMode::Learnable => softplus(self.theta_base),
        }
    }

    pub fn base(&self) -> f64 {
        self.ln_base().exp()
    }

    pub fn regularizer_enabled(&self) -> bool {
        self.beta2_mode != RegularizerMode::Disabled
    }

    /// Raw parameters as `[theta_beta1, theta_beta2, theta_base]`.
    pub fn raw(&self) -> [f64; 3] {
        [self.theta_beta1, self.theta_beta2, self.theta_base]
    }

    pub fn set_raw(&mut self, raw: [f64; 3]) {
        self.theta_beta1 = raw[0];
        self.theta_beta2 = raw[1];
        self.theta_base = raw[2];
    }

    /// Which raw parameters receive gradient updates.
    pub fn trainable_mask(&self) -> [bool; 3] {
        [
            self.beta1_mode == WeightMode::Learnable,
            self.beta2_mode == RegularizerMode::Learnable,
            self.base_mode == BaseMode::Learnable,
        ]
    }
}

/// The regularizer added to cross entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regularizer {
    /// Swapped cross entropy `-sum p_hat log p` (MIX-ENT).
    #[serde(rename = "MIX")]
    Mix,
    /// Entropy of the prediction `-sum p_hat log p_hat` (MIN-ENT).
    #[serde(rename = "MIN")]
    Min,
}

/// Training objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "MIX")]
    Mix,
    #[serde(rename = "MIN")]
    Min,
}

impl LossKind {
    pub fn regularizer(self) -> Option<Regularizer> {
        match self {
            LossKind::Ce => None,
            LossKind::Mix => Some(Regularizer::Mix),
            LossKind::Min => Some(Regularizer::Min),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "CE",
            LossKind::Mix => "MIX",
            LossKind::Min => "MIN",
        }
    }

    /// Display name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            LossKind::Ce => "Cross entropy",
            LossKind::Mix => "MIX-ENT",
            LossKind::Min => "MIN-ENT",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CE" => Ok(LossKind::Ce),
            "MIX" | "MIX-ENT" => Ok(LossKind::Mix),
            "MIN" | "MIN-ENT" => Ok(LossKind::Min),
            other => Err(Error::config(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// Individual loss terms, each already divided by `ln b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    /// Cross entropy `-sum p log p_hat`.
    pub ce1: f64,
    /// Swapped cross entropy `-sum p_hat log p`; `None` for an unsmoothed target.
    pub ce2: Option<f64>,
    /// Entropy of the prediction.
    pub entropy_hat: f64,
    /// Entropy of the target.
    pub entropy_target: f64,
    /// KL divergence weighted by the target.
    pub kl_p: f64,
    /// KL divergence weighted by the prediction; `None` for an unsmoothed target.
    pub kl_phat: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub components: LossComponents,
}

/// Partial derivatives of a loss total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub logits: Vec<f64>,
    pub theta_beta1: f64,
    pub theta_beta2: f64,
    pub theta_base: f64,
}

impl LossGrad {
    pub fn raw(&self) -> [f64; 3] {
        [self.theta_beta1, self.theta_beta2, self.theta_base]
    }
}

fn check_ln_base(ln_base: f64) -> Result<()> {
    if ln_base.is_finite() && ln_base > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "ln(base) must be positive, got {ln_base}"
        )))
    }
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 logits, got {}",
            logits.len()
        )));
    }
    if let Some((i, z)) = logits.iter().enumerate().find(|(_, z)| !z.is_finite()) {
        return Err(Error::invalid(format!("logit {i} is {z}")));
    }
    Ok(())
}

fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::invalid(format!("dimension mismatch: {a} vs {b}")))
    }
}

fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// `log softmax(z)` via log-sum-exp. Caller guarantees finite logits.
fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    check_logits(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / sum).collect()))
}

/// Entropy `-sum p ln p / ln_base` with `0 ln 0 = 0`.
pub fn entropy(p: &ProbVector, ln_base: f64) -> Result<f64> {
    check_ln_base(ln_base)?;
    Ok(entropy_nats(p.as_slice()) / ln_base)
}

fn entropy_nats(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &pi in p {
        if pi > 0.0 {
            h -= pi * pi.ln();
        }
    }
    h
}

/// Cross entropy `-sum target ln p_hat / ln_base`, with `p_hat` floored.
pub fn cross_entropy(target: &ProbVector, p_hat: &ProbVector, ln_base: f64) -> Result<f64> {
    check_same_len(target.len(), p_hat.len())?;
    check_ln_base(ln_base)?;
    let mut ce = 0.0;
    for (t, q) in target.as_slice().iter().zip(p_hat.as_slice()) {
        if *t > 0.0 {
            ce -= t * floored_ln(*q);
        }
    }
    Ok(ce / ln_base)
}

/// Cross entropy of a target against `softmax(logits)`, computed through
/// log-sum-exp so saturated logits stay finite.
pub fn cross_entropy_logits(target: &ProbVector, logits: &[f64], ln_base: f64) -> Result<f64> {
    check_logits(logits)?;
    check_same_len(target.len(), logits.len())?;
    check_ln_base(ln_base)?;
    let logp = log_softmax(logits);
    Ok(ce_nats(target.as_slice(), &logp) / ln_base)
}

/// Gradient of [`cross_entropy_logits`] with respect to the logits:
/// `(softmax(logits) - target) / ln_base`.
pub fn cross_entropy_logits_grad(
    target: &ProbVector,
    logits: &[f64],
    ln_base: f64,
) -> Result<Vec<f64>> {
    check_logits(logits)?;
    check_same_len(target.len(), logits.len())?;
    check_ln_base(ln_base)?;
    let logp = log_softmax(logits);
    Ok(logp
        .iter()
        .zip(target.as_slice())
        .map(|(lp, t)| (lp.exp() - t) / ln_base)
        .collect())
}

fn ce_nats(target: &[f64], logp: &[f64]) -> f64 {
    let mut ce = 0.0;
    for (t, lp) in target.iter().zip(logp) {
        if *t > 0.0 {
            ce -= t * lp;
        }
    }
    ce
}

/// Swapped cross entropy `-sum p_hat ln target / ln_base`. Requires a
/// smoothed target so every `ln target` is finite.
pub fn swapped_cross_entropy<T: Target + ?Sized>(
    target: &T,
    p_hat: &ProbVector,
    ln_base: f64,
) -> Result<f64> {
    if !target.has_full_support() {
        return Err(Error::DegenerateTarget);
    }
    check_same_len(target.num_classes(), p_hat.len())?;
    check_ln_base(ln_base)?;
    let mut ce = 0.0;
    for (i, q) in p_hat.as_slice().iter().enumerate() {
        ce -= q * floored_ln(target.value_at(i));
    }
    Ok(ce / ln_base)
}

/// `KL(weighting || other) = sum w ln(w / o) / ln_base`, `other` floored.
/// Argument order selects the orientation: `kl_divergence(p, p_hat)` is the
/// target-weighted divergence, `kl_divergence(p_hat, p)` the
/// prediction-weighted one.
pub fn kl_divergence(weighting: &ProbVector, other: &ProbVector, ln_base: f64) -> Result<f64> {
    check_same_len(weighting.len(), other.len())?;
    check_ln_base(ln_base)?;
    let mut kl = 0.0;
    for (w, o) in weighting.as_slice().iter().zip(other.as_slice()) {
        if *w > 0.0 {
            kl += w * (w.ln() - floored_ln(*o));
        }
    }
    Ok(kl / ln_base)
}

/// Everything one sample contributes to the forward and backward passes.
struct Evaluated {
    value: LossValue,
    /// Regularizer value in base units; 0 when disabled.
    reg: f64,
    logp: Vec<f64>,
    ln_target: Option<Vec<f64>>,
}

fn evaluate<T: Target + ?Sized>(
    regularizer: Option<Regularizer>,
    logits: &[f64],
    target: &T,
    params: &LossParams,
) -> Result<Evaluated> {
    check_logits(logits)?;
    check_same_len(target.num_classes(), logits.len())?;
    let ln_base = params.ln_base();
    check_ln_base(ln_base)?;
    let regularizer = regularizer.filter(|_| params.regularizer_enabled());
    let full_support = target.has_full_support();
    if regularizer == Some(Regularizer::Mix) && !full_support {
        return Err(Error::DegenerateTarget);
    }

    let k = logits.len();
    let logp = log_softmax(logits);
    let t: Vec<f64> = (0..k).map(|i| target.value_at(i)).collect();
    let t = t.as_slice();

    let ce1_n = ce_nats(t, &logp);
    let mut entropy_hat_n = 0.0;
    for lp in &logp {
        entropy_hat_n -= lp.exp() * lp;
    }
    let entropy_target_n = entropy_nats(t);
    let mut kl_p_n = 0.0;
    for (ti, lp) in t.iter().zip(&logp) {
        if *ti > 0.0 {
            kl_p_n += ti * (ti.ln() - lp);
        }
    }

    let ln_target = full_support.then(|| t.iter().map(|v| floored_ln(*v)).collect::<Vec<_>>());
    let (ce2, kl_phat) = match &ln_target {
        Some(lt) => {
            let mut ce2_n = 0.0;
            let mut kl_n = 0.0;
            for (lp, l) in logp.iter().zip(lt) {
                let q = lp.exp();
                ce2_n -= q * l;
                kl_n += q * (lp - l);
            }
            (Some(ce2_n / ln_base), Some(kl_n / ln_base))
        }
        None => (None, None),
    };

    let components = LossComponents {
        ce1: ce1_n / ln_base,
        ce2,
        entropy_hat: entropy_hat_n / ln_base,
        entropy_target: entropy_target_n / ln_base,
        kl_p: kl_p_n / ln_base,
        kl_phat,
    };
    let beta1 = params.beta1();
    let (total, reg) = match regularizer {
        None => (beta1 * components.ce1, 0.0),
        Some(r) => {
            let reg = match r {
                Regularizer::Mix => ce2.expect("smoothed target checked above"),
                Regularizer::Min => components.entropy_hat,
            };
            (beta1 * components.ce1 + params.beta2() * reg, reg)
        }
    };
    Ok(Evaluated {
        value: LossValue { total, components },
        reg,
        logp,
        ln_target,
    })
}

fn backward_from<T: Target + ?Sized>(
    regularizer: Option<Regularizer>,
    ev: &Evaluated,
    target: &T,
    params: &LossParams,
) -> LossGrad {
    let ln_base = params.ln_base();
    let beta1 = params.beta1();
    let beta2 = params.beta2();
    let regularizer = regularizer.filter(|_| params.regularizer_enabled());
    let k = ev.logp.len();

    let mut grad = Vec::with_capacity(k);
    match regularizer {
        None => {
            for (i, lp) in ev.logp.iter().enumerate() {
                grad.push(beta1 * (lp.exp() - target.value_at(i)) / ln_base);
            }
        }
        Some(Regularizer::Mix) => {
            // d/dz_j (-sum q_i a_i) = -q_j (a_j - sum q_i a_i), a = ln target
            let lt = ev.ln_target.as_ref().expect("smoothed target");
            let mean: f64 = ev.logp.iter().zip(lt).map(|(lp, a)| lp.exp() * a).sum();
            for (i, lp) in ev.logp.iter().enumerate() {
                let q = lp.exp();
                let g_ce = q - target.value_at(i);
                let g_reg = -q * (lt[i] - mean);
                grad.push((beta1 * g_ce + beta2 * g_reg) / ln_base);
            }
        }
        Some(Regularizer::Min) => {
            // d/dz_j H = -q_j (ln q_j + H)
            let h: f64 = -ev.logp.iter().map(|lp| lp.exp() * lp).sum::<f64>();
            for (i, lp) in ev.logp.iter().enumerate() {
                let q = lp.exp();
                let g_ce = q - target.value_at(i);
                let g_reg = -q * (lp + h);
                grad.push((beta1 * g_ce + beta2 * g_reg) / ln_base);
            }
        }
    }

    let theta_beta1 = match params.beta1_mode {
        WeightMode::Learnable => sigmoid(params.theta_beta1) * ev.value.components.ce1,
        WeightMode::Fixed(_) => 0.0,
    };
    let theta_beta2 = match (regularizer, params.beta2_mode) {
        (Some(_), RegularizerMode::Learnable) => sigmoid(params.theta_beta2) * ev.reg,
        _ => 0.0,
    };
    let theta_base = match params.base_mode {
        BaseMode::Learnable => -sigmoid(params.theta_base) * ev.value.total / ln_base,
        BaseMode::Fixed(_) => 0.0,
    };
    LossGrad {
        logits: grad,
        theta_beta1,
        theta_beta2,
        theta_base,
    }
}

/// MIX-ENT: `beta1 * CE + beta2 * swapped CE`.
pub fn mix_ent_loss<T: Target + ?Sized>(
    logits: &[f64],
    target: &T,
    params: &LossParams,
) -> Result<LossValue> {
    evaluate(Some(Regularizer::Mix), logits, target, params).map(|e| e.value)
}

/// MIN-ENT: `beta1 * CE + beta2 * H(softmax(logits))`.
pub fn min_ent_loss<T: Target + ?Sized>(
    logits: &[f64],
    target: &T,
    params: &LossParams,
) -> Result<LossValue> {
    evaluate(Some(Regularizer::Min), logits, target, params).map(|e| e.value)
}

/// Gradient of [`mix_ent_loss`] or [`min_ent_loss`] with respect to the
/// logits and the three raw loss parameters.
pub fn loss_backward<T: Target + ?Sized>(
    logits: &[f64],
    target: &T,
    params: &LossParams,
    which: Regularizer,
) -> Result<LossGrad> {
    let ev = evaluate(Some(which), logits, target, params)?;
    Ok(backward_from(Some(which), &ev, target, params))
}

/// Forward and backward in one pass for any [`LossKind`]. `LossKind::Ce`
/// ignores `beta2` entirely.
pub fn loss_value_and_grad<T: Target + ?Sized>(
    kind: LossKind,
    logits: &[f64],
    target: &T,
    params: &LossParams,
) -> Result<(LossValue, LossGrad)> {
    let ev = evaluate(kind.regularizer(), logits, target, params)?;
    let grad = backward_from(kind.regularizer(), &ev, target, params);
    Ok((ev.value, grad))
}

/// Forward pass for any [`LossKind`].
pub fn loss_value<T: Target + ?Sized>(
    kind: LossKind,
    logits: &[f64],
    target: &T,
    params: &LossParams,
) -> Result<LossValue> {
    evaluate(kind.regularizer(), logits, target, params).map(|e| e.value)
}
