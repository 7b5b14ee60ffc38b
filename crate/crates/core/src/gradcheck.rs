//! Finite-difference and identity suites run by the `gradcheck` subcommand.
//!
//! Errors are normalized as `|a - b| / max(|a|, |b|, abs_tol / rel_tol)`, so a
//! value `<= rel_tol` means "within `rel_tol` relative or `abs_tol`
//! absolute, whichever is looser".

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::loss::{
    cross_entropy, entropy, kl_divergence, loss_value, loss_value_and_grad, softmax,
    swapped_cross_entropy, BaseMode, LossKind, LossParams, ProbVector, RegularizerMode,
    SmoothedTarget, WeightMode,
};
use crate::net::{NetConfig, NetState, TensorKind};

pub const FD_STEP: f64 = 1e-5;
pub const LOSS_HEAD_TOL: f64 = 1e-5;
pub const COMPOSED_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-8;
pub const DECOMPOSITION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Per (loss kind, class count).
    pub loss_head_instances: usize,
    /// Per loss kind.
    pub composed_instances: usize,
    /// Per class count (and per smoothing level for the swapped identity).
    pub decomposition_pairs: usize,
    pub class_counts: Vec<usize>,
    /// Perturb analytic gradients so the suites must fail.
    pub inject_bug: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            loss_head_instances: 100,
            composed_instances: 20,
            decomposition_pairs: 1000,
            class_counts: vec![2, 5, 26],
            inject_bug: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// JSON of the worst failing instance, if any failed.
    pub failure: Option<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

pub fn normalized_error(a: f64, b: f64, rel_tol: f64, abs_tol: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(abs_tol / rel_tol);
    let err = (a - b).abs() / scale;
    if err.is_nan() {
        f64::INFINITY
    } else {
        err
    }
}

struct Tracker {
    report: SuiteReport,
    worst_failure: f64,
}

impl Tracker {
    fn new(name: String, tolerance: f64) -> Self {
        Tracker {
            report: SuiteReport {
                name,
                instances: 0,
                max_error: 0.0,
                tolerance,
                failure: None,
            },
            worst_failure: 0.0,
        }
    }

    fn observe(&mut self, err: f64, describe: impl FnOnce() -> String) {
        self.report.max_error = self.report.max_error.max(err);
        if err > self.report.tolerance && err > self.worst_failure {
            self.worst_failure = err;
            self.report.failure = Some(describe());
        }
    }
}

#[derive(Serialize)]
struct LossHeadInstance<'a> {
    suite: &'a str,
    instance: usize,
    logits: &'a [f64],
    class_index: usize,
    epsilon: f64,
    theta: [f64; 3],
    coordinate: String,
    analytic: f64,
    numeric: f64,
}

fn random_params<R: Rng>(rng: &mut R, kind: LossKind) -> LossParams {
    if kind == LossKind::Ce {
        return LossParams::cross_entropy();
    }
    LossParams {
        theta_beta1: rng.gen_range(-2.0..2.0),
        theta_beta2: rng.gen_range(-2.0..2.0),
        theta_base: rng.gen_range(-2.0..2.0),
        beta1_mode: WeightMode::Learnable,
        beta2_mode: RegularizerMode::Learnable,
        base_mode: BaseMode::Learnable,
    }
}

fn perturb(value: f64, inject_bug: bool) -> f64 {
    if inject_bug {
        value * (1.0 + 1e-3) + 1e-3
    } else {
        value
    }
}

fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64) -> Result<f64> {
    Ok((f(x + FD_STEP)? - f(x - FD_STEP)?) / (2.0 * FD_STEP))
}

fn loss_head_suite(kind: LossKind, k: usize, opts: &GradcheckOptions) -> Result<SuiteReport> {
    let name = format!("loss-head {} K={k}", kind.name());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(1000 + k as u64 * 10 + kind as u64);
    let mut t = Tracker::new(name.clone(), LOSS_HEAD_TOL);
    for instance in 0..opts.loss_head_instances {
        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let class_index = rng.gen_range(0..k);
        let epsilon = rng.gen_range(1e-3..0.2);
        let target = SmoothedTarget::new(class_index, epsilon, k)?;
        let params = random_params(&mut rng, kind);
        let (_, grad) = loss_value_and_grad(kind, &logits, &target, &params)?;

        let describe = |coordinate: String, analytic: f64, numeric: f64| {
            serde_json::to_string(&LossHeadInstance {
                suite: &name,
                instance,
                logits: &logits,
                class_index,
                epsilon,
                theta: params.raw(),
                coordinate,
                analytic,
                numeric,
            })
            .unwrap_or_default()
        };
        for j in 0..k {
            let numeric = central_difference(
                |x| {
                    let mut z = logits.clone();
                    z[j] = x;
                    Ok(loss_value(kind, &z, &target, &params)?.total)
                },
                logits[j],
            )?;
            let analytic = perturb(grad.logits[j], opts.inject_bug);
            let err = normalized_error(analytic, numeric, LOSS_HEAD_TOL, ABS_TOL);
            t.observe(err, || describe(format!("logits[{j}]"), analytic, numeric));
        }
        let raw = params.raw();
        for (i, label) in ["theta_beta1", "theta_beta2", "theta_base"]
            .iter()
            .enumerate()
        {
            let numeric = central_difference(
                |x| {
                    let mut p = params;
                    let mut r = raw;
                    r[i] = x;
                    p.set_raw(r);
                    Ok(loss_value(kind, &logits, &target, &p)?.total)
                },
                raw[i],
            )?;
            let analytic = perturb(grad.raw()[i], opts.inject_bug);
            let err = normalized_error(analytic, numeric, LOSS_HEAD_TOL, ABS_TOL);
            t.observe(err, || describe(label.to_string(), analytic, numeric));
        }
        t.report.instances += 1;
    }
    Ok(t.report)
}

/// A network, batch and loss head small enough for exhaustive finite
/// differences.
#[derive(Debug, Clone)]
pub struct ComposedInstance {
    pub net: NetState,
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub epsilon: f64,
    pub params: LossParams,
}

/// Distance of the closest hidden pre-activation to the ReLU kink.
fn kink_margin(net: &NetState, inputs: ArrayView2<f64>) -> f64 {
    let mut act = inputs.to_owned();
    let mut margin = f64::INFINITY;
    let last = net.layers().len() - 1;
    for layer in &net.layers()[..last] {
        let mut z = act.dot(&layer.weight.t());
        z += &layer.bias;
        margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
        act = z.mapv(|v| v.max(0.0));
    }
    margin
}

impl ComposedInstance {
    /// Seeded random instance kept away from ReLU kinks.
    pub fn sample(seed: u64, index: usize, kind: LossKind) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(5000 + index as u64);
        loop {
            let num_classes = rng.gen_range(2..6);
            let config = NetConfig {
                input_dim: 6,
                hidden_dims: vec![5, 4],
                num_classes,
                dropout_rate: 0.0,
                seed: rng.gen(),
            };
            let mut net = NetState::init(config)?;
            for (_, bias) in net
                .tensors_mut()
                .into_iter()
                .filter(|(kind, _)| *kind == TensorKind::Bias)
            {
                for b in bias.iter_mut() {
                    *b += rng.gen_range(-0.1..0.1);
                }
            }
            let batch = 4;
            let inputs = Array2::from_shape_simple_fn((batch, 6), || rng.gen_range(-1.0..1.0));
            let labels = (0..batch).map(|_| rng.gen_range(0..num_classes)).collect();
            let epsilon = rng.gen_range(1e-3..0.2);
            let params = random_params(&mut rng, kind);
            if kink_margin(&net, inputs.view()) > 1e-3 {
                return Ok(ComposedInstance {
                    net,
                    inputs,
                    labels,
                    epsilon,
                    params,
                });
            }
        }
    }

    /// Batch-mean loss.
    pub fn loss(&self, net: &NetState, params: &LossParams, kind: LossKind) -> Result<f64> {
        let logits = net.forward_eval(self.inputs.view())?;
        let k = net.config().num_classes;
        let mut total = 0.0;
        for (row, &label) in logits.rows().into_iter().zip(&self.labels) {
            let target = SmoothedTarget::new(label, self.epsilon, k)?;
            total += loss_value(kind, row.as_slice().expect("row-major"), &target, params)?.total;
        }
        Ok(total / self.labels.len() as f64)
    }

    /// Analytic gradient, flattened: every network tensor in order, then the
    /// three raw loss-head parameters.
    pub fn analytic_gradient(&self, kind: LossKind) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (logits, cache) = self.net.forward_train(self.inputs.view(), &mut rng)?;
        let k = self.net.config().num_classes;
        let n = self.labels.len() as f64;
        let mut grad_logits = Array2::zeros(logits.raw_dim());
        let mut head = [0.0; 3];
        for (i, &label) in self.labels.iter().enumerate() {
            let row = logits.row(i).to_vec();
            let target = SmoothedTarget::new(label, self.epsilon, k)?;
            let (_, g) = loss_value_and_grad(kind, &row, &target, &self.params)?;
            for (j, v) in g.logits.iter().enumerate() {
                grad_logits[[i, j]] = v / n;
            }
            for (h, v) in head.iter_mut().zip(g.raw()) {
                *h += v / n;
            }
        }
        let grads = self.net.backward(&cache, grad_logits.view())?;
        let mut flat: Vec<f64> = grads.tensors().into_iter().flatten().copied().collect();
        flat.extend(head);
        Ok(flat)
    }

    pub fn numeric_gradient(&self, kind: LossKind) -> Result<Vec<f64>> {
        let mut flat = Vec::new();
        let sizes: Vec<usize> = self.net.tensors().iter().map(|t| t.len()).collect();
        for (ti, &size) in sizes.iter().enumerate() {
            for j in 0..size {
                let x = self.net.tensors()[ti][j];
                flat.push(central_difference(
                    |v| {
                        let mut net = self.net.clone();
                        net.tensors_mut()[ti].1[j] = v;
                        self.loss(&net, &self.params, kind)
                    },
                    x,
                )?);
            }
        }
        let raw = self.params.raw();
        for i in 0..3 {
            flat.push(central_difference(
                |v| {
                    let mut p = self.params;
                    let mut r = raw;
                    r[i] = v;
                    p.set_raw(r);
                    self.loss(&self.net, &p, kind)
                },
                raw[i],
            )?);
        }
        Ok(flat)
    }
}

#[derive(Serialize)]
struct ComposedFailure<'a> {
    suite: &'a str,
    seed: u64,
    instance: usize,
    coordinate: usize,
    analytic: f64,
    numeric: f64,
}

fn composed_suite(kind: LossKind, opts: &GradcheckOptions) -> Result<SuiteReport> {
    let name = format!("composed {}", kind.name());
    let mut t = Tracker::new(name.clone(), COMPOSED_TOL);
    for instance in 0..opts.composed_instances {
        let inst = ComposedInstance::sample(opts.seed, instance, kind)?;
        let analytic = inst.analytic_gradient(kind)?;
        let numeric = inst.numeric_gradient(kind)?;
        for (coordinate, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let a = perturb(*a, opts.inject_bug);
            let err = normalized_error(a, *n, COMPOSED_TOL, ABS_TOL);
            t.observe(err, || {
                serde_json::to_string(&ComposedFailure {
                    suite: &name,
                    seed: opts.seed,
                    instance,
                    coordinate,
                    analytic: a,
                    numeric: *n,
                })
                .unwrap_or_default()
            });
        }
        t.report.instances += 1;
    }
    Ok(t.report)
}

/// Random distribution with every entry at least `1e-6 / k`.
pub fn random_distribution<R: Rng>(rng: &mut R, k: usize) -> ProbVector {
    let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
    softmax(&logits).expect("finite logits")
}

#[derive(Serialize)]
struct DecompositionFailure<'a> {
    suite: &'a str,
    p: &'a [f64],
    q: &'a [f64],
    epsilon: Option<f64>,
    class_index: Option<usize>,
    lhs: f64,
    rhs: f64,
}

fn ce_decomposition_suite(k: usize, opts: &GradcheckOptions) -> Result<SuiteReport> {
    let name = format!("ce = kl(p||q) + H(p) K={k}");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(9000 + k as u64);
    let mut t = Tracker::new(name.clone(), DECOMPOSITION_TOL);
    for _ in 0..opts.decomposition_pairs {
        let p = random_distribution(&mut rng, k);
        let q = random_distribution(&mut rng, k);
        let lhs = cross_entropy(&p, &q, 1.0)?;
        let rhs = perturb(
            kl_divergence(&p, &q, 1.0)? + entropy(&p, 1.0)?,
            opts.inject_bug,
        );
        let err = normalized_error(lhs, rhs, DECOMPOSITION_TOL, 1e-15);
        t.observe(err, || {
            serde_json::to_string(&DecompositionFailure {
                suite: &name,
                p: p.as_slice(),
                q: q.as_slice(),
                epsilon: None,
                class_index: None,
                lhs,
                rhs,
            })
            .unwrap_or_default()
        });
        t.report.instances += 1;
    }
    Ok(t.report)
}

fn swapped_decomposition_suite(k: usize, opts: &GradcheckOptions) -> Result<SuiteReport> {
    let name = format!("swapped ce = kl(q||p) + H(q) K={k}");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(9500 + k as u64);
    let mut t = Tracker::new(name.clone(), DECOMPOSITION_TOL);
    for epsilon in [0.001, 0.01, 0.1] {
        for _ in 0..opts.decomposition_pairs {
            let class_index = rng.gen_range(0..k);
            let target = SmoothedTarget::new(class_index, epsilon, k)?;
            let q = random_distribution(&mut rng, k);
            let lhs = swapped_cross_entropy(&target, &q, 1.0)?;
            let rhs = perturb(
                kl_divergence(&q, &target.materialize(), 1.0)? + entropy(&q, 1.0)?,
                opts.inject_bug,
            );
            let err = normalized_error(lhs, rhs, DECOMPOSITION_TOL, 1e-15);
            t.observe(err, || {
                serde_json::to_string(&DecompositionFailure {
                    suite: &name,
                    p: target.materialize().as_slice(),
                    q: q.as_slice(),
                    epsilon: Some(epsilon),
                    class_index: Some(class_index),
                    lhs,
                    rhs,
                })
                .unwrap_or_default()
            });
            t.report.instances += 1;
        }
    }
    Ok(t.report)
}

/// Every suite, in a fixed order.
pub fn run_all(opts: &GradcheckOptions) -> Result<Vec<SuiteReport>> {
    let kinds = [LossKind::Ce, LossKind::Mix, LossKind::Min];
    let mut reports = Vec::new();
    for &k in &opts.class_counts {
        reports.push(ce_decomposition_suite(k, opts)?);
        reports.push(swapped_decomposition_suite(k, opts)?);
    }
    for kind in kinds {
        for &k in &opts.class_counts {
            reports.push(loss_head_suite(kind, k, opts)?);
        }
    }
    for kind in kinds {
        reports.push(composed_suite(kind, opts)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GradcheckOptions {
        GradcheckOptions {
            loss_head_instances: 10,
            composed_instances: 2,
            decomposition_pairs: 50,
            ..GradcheckOptions::default()
        }
    }

    #[test]
    fn suites_pass() {
        for r in run_all(&small()).unwrap() {
            assert!(r.passed(), "{}: {:e} {:?}", r.name, r.max_error, r.failure);
            assert!(r.instances > 0);
        }
    }

    #[test]
    fn injected_bug_is_caught() {
        let opts = GradcheckOptions {
            inject_bug: true,
            ..small()
        };
        for r in run_all(&opts).unwrap() {
            assert!(!r.passed(), "{} did not detect the perturbation", r.name);
            let json: serde_json::Value =
                serde_json::from_str(r.failure.as_ref().unwrap()).unwrap();
            assert!(json.get("suite").is_some());
        }
    }

    #[test]
    fn normalized_error_floors() {
        assert_eq!(normalized_error(1.0, 1.0, 1e-5, 1e-8), 0.0);
        assert!(normalized_error(1e-9, 0.0, 1e-5, 1e-8) <= 1e-5);
        assert!(normalized_error(2e-8, 0.0, 1e-5, 1e-8) > 1e-5);
        assert!(normalized_error(f64::NAN, 0.0, 1e-5, 1e-8).is_infinite());
    }
}
