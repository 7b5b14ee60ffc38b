//! SGD with momentum and Adam over flat parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::TensorKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "SGD")]
    Sgd,
    #[serde(rename = "Adam")]
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "SGD",
            OptimizerKind::Adam => "Adam",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SGD" | "sgd" => Ok(OptimizerKind::Sgd),
            "Adam" | "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Hyperparameters for one parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// L2 coefficient added to the gradient of `TensorKind::Weight` tensors.
    pub weight_decay: f64,
}

pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment buffers for every tensor of a parameter group.
/// SGD only uses `first`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(tensor_lens: &[usize]) -> Self {
        OptimizerState {
            step: 0,
            first: tensor_lens.iter().map(|n| vec![0.0; *n]).collect(),
            second: tensor_lens.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.first
            .iter()
            .chain(&self.second)
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Apply one update. `params` and `grads` must line up with the tensor
    /// lengths the state was created with.
    pub fn apply(
        &mut self,
        params: Vec<(TensorKind, &mut [f64])>,
        grads: &[&[f64]],
        settings: &StepSettings,
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = settings.betas;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (i, ((kind, p), g)) in params.into_iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first[i].len() {
                return Err(Error::Contract(format!("tensor {i} length mismatch")));
            }
            let wd = match kind {
                TensorKind::Weight => settings.weight_decay,
                TensorKind::Bias => 0.0,
            };
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            match settings.kind {
                OptimizerKind::Sgd => {
                    for j in 0..p.len() {
                        let grad = g[j] + wd * p[j];
                        m[j] = settings.momentum * m[j] + grad;
                        p[j] -= settings.lr * m[j];
                    }
                }
                OptimizerKind::Adam => {
                    for j in 0..p.len() {
                        let grad = g[j] + wd * p[j];
                        m[j] = b1 * m[j] + (1.0 - b1) * grad;
                        v[j] = b2 * v[j] + (1.0 - b2) * grad * grad;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        p[j] -= settings.lr * m_hat / (v_hat.sqrt() + settings.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(kind: OptimizerKind, lr: f64) -> StepSettings {
        StepSettings {
            kind,
            lr,
            momentum: 0.9,
            betas: (0.9, 0.999),
            eps: ADAM_EPS,
            weight_decay: 0.0,
        }
    }

    #[test]
    fn adam_first_step_is_sign_scaled() {
        for g in [3.0, -0.02, 1e-3] {
            let mut state = OptimizerState::new(&[1]);
            let mut p = [0.5];
            state
                .apply(
                    vec![(TensorKind::Weight, &mut p)],
                    &[&[g]],
                    &settings(OptimizerKind::Adam, 0.1),
                )
                .unwrap();
            let moved = p[0] - 0.5;
            let expect = -0.1 * g.signum() * (g.abs() / (g.abs() + ADAM_EPS));
            assert!((moved - expect).abs() < 1e-15);
            assert!((moved + 0.1 * g.signum()).abs() < 0.1 * 1e-8 / g.abs() + 1e-15);
        }
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut state = OptimizerState::new(&[1]);
        let mut p = [1.0];
        let s = settings(OptimizerKind::Sgd, 0.1);
        state
            .apply(vec![(TensorKind::Bias, &mut p)], &[&[1.0]], &s)
            .unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
        state
            .apply(vec![(TensorKind::Bias, &mut p)], &[&[1.0]], &s)
            .unwrap();
        // buffer = 0.9 * 1 + 1 = 1.9
        assert!((p[0] - (0.9 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut s = settings(OptimizerKind::Sgd, 0.5);
        s.momentum = 0.0;
        s.weight_decay = 0.1;
        let mut state = OptimizerState::new(&[1, 1]);
        let mut w = [2.0];
        let mut b = [2.0];
        state
            .apply(
                vec![(TensorKind::Weight, &mut w), (TensorKind::Bias, &mut b)],
                &[&[0.0], &[0.0]],
                &s,
            )
            .unwrap();
        assert!((w[0] - (2.0 - 0.5 * 0.2)).abs() < 1e-15);
        assert_eq!(b[0], 2.0);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut state = OptimizerState::new(&[2]);
        let mut p = [0.25, -4.0];
        let mut s = settings(OptimizerKind::Adam, 0.0);
        s.weight_decay = 0.3;
        state
            .apply(vec![(TensorKind::Weight, &mut p)], &[&[1.0, -2.0]], &s)
            .unwrap();
        assert_eq!(p, [0.25, -4.0]);
    }

    #[test]
    fn length_mismatch_is_contract_error() {
        let mut state = OptimizerState::new(&[2]);
        let mut p = [0.0];
        let r = state.apply(
            vec![(TensorKind::Weight, &mut p)],
            &[&[1.0]],
            &settings(OptimizerKind::Sgd, 0.1),
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
