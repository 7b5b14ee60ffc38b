//! Finite-difference oracles shared by the gradient tests and the
//! acceptance harness. Losses are re-derived here from their definitions;
//! only the analytic side comes from the library.
#![allow(dead_code)]

use minent::loss::{
    loss_value_and_grad, BaseMode, LossKind, LossParams, RegularizerMode, SmoothedTarget,
    WeightMode,
};
use minent::net::{NetConfig, NetState};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const LOSS_HEAD_TOL: f64 = 1e-5;
pub const COMPOSED_TOL: f64 = 1e-4;

/// Relative disagreement, with magnitudes below 1e-3 treated as 1e-3 so
/// near-zero partials are judged on absolute error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d.is_nan() {
        return f64::INFINITY;
    }
    d / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn agrees(analytic: f64, numeric: f64, rel: f64) -> bool {
    rel_err(analytic, numeric) <= rel
}

pub fn learnable(theta: [f64; 3]) -> LossParams {
    LossParams {
        theta_beta1: theta[0],
        theta_beta2: theta[1],
        theta_base: theta[2],
        beta1_mode: WeightMode::Learnable,
        beta2_mode: RegularizerMode::Learnable,
        base_mode: BaseMode::Learnable,
    }
}

/// Params the library should use for `kind` when the oracle sees `theta`.
pub fn params_for(kind: LossKind, theta: [f64; 3]) -> LossParams {
    match kind {
        LossKind::Ce => LossParams::cross_entropy(),
        _ => learnable(theta),
    }
}

/// Direct transcription of the loss definitions, natural log throughout.
pub fn oracle_total(kind: LossKind, z: &[f64], class: usize, eps: f64, theta: [f64; 3]) -> f64 {
    let sp = |x: f64| (1.0 + x.exp()).ln();
    let k = z.len();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let logq: Vec<f64> = z.iter().map(|v| v - lse).collect();
    let q: Vec<f64> = logq.iter().map(|v| v.exp()).collect();
    let t: Vec<f64> = (0..k)
        .map(|i| {
            if i == class {
                1.0 - eps + eps / k as f64
            } else {
                eps / k as f64
            }
        })
        .collect();
    let ce1: f64 = -(0..k).map(|i| t[i] * logq[i]).sum::<f64>();
    match kind {
        LossKind::Ce => ce1,
        LossKind::Mix => {
            let ce2: f64 = -(0..k).map(|i| q[i] * t[i].ln()).sum::<f64>();
            (sp(theta[0]) * ce1 + sp(theta[1]) * ce2) / sp(theta[2])
        }
        LossKind::Min => {
            let h: f64 = -(0..k).map(|i| q[i] * logq[i]).sum::<f64>();
            (sp(theta[0]) * ce1 + sp(theta[1]) * h) / sp(theta[2])
        }
    }
}

fn central(f: impl Fn(f64) -> f64) -> f64 {
    (f(H) - f(-H)) / (2.0 * H)
}

/// Max relative error over all logit and raw-parameter partials of one
/// random loss-head instance with `k` classes.
pub fn loss_head_instance(rng: &mut ChaCha8Rng, kind: LossKind, k: usize) -> f64 {
    let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let class = rng.gen_range(0..k);
    let eps = rng.gen_range(0.001..0.2);
    let theta = [0; 3].map(|_| rng.gen_range(-2.0..2.0));
    let t = SmoothedTarget::new(class, eps, k).unwrap();
    let (_, g) = loss_value_and_grad(kind, &z, &t, &params_for(kind, theta)).unwrap();
    let mut worst = 0.0f64;
    for j in 0..k {
        let fd = central(|h| {
            let mut zz = z.clone();
            zz[j] += h;
            oracle_total(kind, &zz, class, eps, theta)
        });
        worst = worst.max(rel_err(g.logits[j], fd));
    }
    for i in 0..3 {
        let fd = if kind == LossKind::Ce {
            0.0
        } else {
            central(|h| {
                let mut th = theta;
                th[i] += h;
                oracle_total(kind, &z, class, eps, th)
            })
        };
        worst = worst.max(rel_err(g.raw()[i], fd));
    }
    worst
}

pub type Layers = Vec<(Array2<f64>, Vec<f64>)>;

/// Batch-mean loss of a dense ReLU network, forward pass written here.
pub fn net_loss(
    layers: &Layers,
    x: &Array2<f64>,
    labels: &[usize],
    kind: LossKind,
    eps: f64,
    theta: [f64; 3],
) -> f64 {
    let mut total = 0.0;
    for (row, &label) in x.rows().into_iter().zip(labels) {
        let mut a: Vec<f64> = row.to_vec();
        for (i, (w, b)) in layers.iter().enumerate() {
            let mut z: Vec<f64> = (0..w.nrows())
                .map(|o| b[o] + (0..w.ncols()).map(|c| w[[o, c]] * a[c]).sum::<f64>())
                .collect();
            if i + 1 < layers.len() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        total += oracle_total(kind, &a, label, eps, theta);
    }
    total / labels.len() as f64
}

fn near_relu_kink(layers: &Layers, x: &Array2<f64>) -> bool {
    let mut a = x.clone();
    for (w, b) in &layers[..layers.len() - 1] {
        let mut z = a.dot(&w.t());
        for mut r in z.rows_mut() {
            r.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        if z.iter().any(|v| v.abs() < 1e-3) {
            return true;
        }
        a = z.mapv(|v| v.max(0.0));
    }
    false
}

/// One random network + loss instance: returns the max relative error over
/// every weight and bias partial, and the number of partials checked.
/// `None` when a hidden pre-activation sits too close to the ReLU kink for
/// central differences to be meaningful.
pub fn composed_instance(rng: &mut ChaCha8Rng, kind: LossKind) -> Option<(f64, usize)> {
    let k = rng.gen_range(2..=5);
    let d = rng.gen_range(2..=10);
    let config = NetConfig {
        input_dim: d,
        hidden_dims: vec![rng.gen_range(1..=8), rng.gen_range(1..=8)],
        num_classes: k,
        dropout_rate: 0.0,
        seed: rng.gen(),
    };
    let mut net = NetState::init(config).unwrap();
    for layer in net.layers_mut() {
        layer
            .bias
            .iter_mut()
            .for_each(|b| *b = rng.gen_range(-0.2..0.2));
    }
    let n = 3;
    let x = Array2::from_shape_simple_fn((n, d), || rng.gen_range(-1.0..1.0));
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let eps = rng.gen_range(0.001..0.2);
    let theta = [0; 3].map(|_| rng.gen_range(-1.0..1.0));
    let lp = params_for(kind, theta);

    let layers: Layers = net
        .layers()
        .iter()
        .map(|l| (l.weight.clone(), l.bias.to_vec()))
        .collect();
    if near_relu_kink(&layers, &x) {
        return None;
    }

    let (logits, cache) = net
        .forward_train(x.view(), &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let mut grad_logits = Array2::zeros(logits.raw_dim());
    for i in 0..n {
        let t = SmoothedTarget::new(labels[i], eps, k).unwrap();
        let (_, g) = loss_value_and_grad(kind, &logits.row(i).to_vec(), &t, &lp).unwrap();
        for j in 0..k {
            grad_logits[[i, j]] = g.logits[j] / n as f64;
        }
    }
    let grads = net.backward(&cache, grad_logits.view()).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();

    let loss = |ls: &Layers| net_loss(ls, &x, &labels, kind, eps, theta);
    let (mut worst, mut checked) = (0.0f64, 0);
    for (li, (w, b)) in layers.iter().enumerate() {
        for (idx, _) in w.indexed_iter() {
            let fd = central(|h| {
                let mut ls = layers.clone();
                ls[li].0[idx] += h;
                loss(&ls)
            });
            worst = worst.max(rel_err(analytic[2 * li][idx.0 * w.ncols() + idx.1], fd));
            checked += 1;
        }
        for o in 0..b.len() {
            let fd = central(|h| {
                let mut ls = layers.clone();
                ls[li].1[o] += h;
                loss(&ls)
            });
            worst = worst.max(rel_err(analytic[2 * li + 1][o], fd));
            checked += 1;
        }
    }
    Some((worst, checked))
}
