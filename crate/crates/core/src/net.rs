//! Fully-connected ReLU classifier with inverted dropout and hand-written
//! backpropagation.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    /// Empty for a pure linear model.
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        if let Some(i) = self.hidden_dims.iter().position(|d| *d == 0) {
            return Err(Error::config(format!("hidden layer {i} has zero width")));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// `(fan_out, fan_in)` for every layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

/// He-uniform bound `sqrt(6 / fan_in)`.
pub fn he_uniform_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `(fan_out, fan_in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct NetState {
    config: NetConfig,
    layers: Vec<Layer>,
    /// Bumped on every parameter mutation so stale caches are detected.
    version: u64,
}

impl PartialEq for NetState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.layers == other.layers
    }
}

/// Activations recorded by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// Input to each layer (after ReLU and dropout for hidden layers).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre_activations: Vec<Array2<f64>>,
    /// Scaled keep masks for each hidden layer; `None` when dropout is off.
    masks: Vec<Option<Array2<f64>>>,
}

/// Gradients with the same layout as [`NetState`]'s layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<Layer>,
}

impl NetGrads {
    pub fn zeros_like(state: &NetState) -> Self {
        NetGrads {
            layers: state
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Flattened tensors in checkpoint order: `W0, b0, W1, b1, ...`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        flat_tensors(&self.layers)
    }
}

fn flat_tensors(layers: &[Layer]) -> Vec<&[f64]> {
    layers
        .iter()
        .flat_map(|l| {
            [
                l.weight.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
        .collect()
}

/// Role of a parameter tensor; weight decay only touches weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
}

impl NetState {
    pub fn init(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(out, fan_in)| {
                let bound = he_uniform_bound(fan_in);
                let dist = Uniform::new_inclusive(-bound, bound);
                Layer {
                    weight: Array2::from_shape_simple_fn((out, fan_in), || dist.sample(&mut rng)),
                    bias: Array1::zeros(out),
                }
            })
            .collect();
        Ok(NetState {
            config,
            layers,
            version: 0,
        })
    }

    /// Assemble a state from explicit layers, checking shapes against `config`.
    pub fn from_layers(config: NetConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::invalid(format!(
                "expected {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (i, ((out, fan_in), l)) in shapes.iter().zip(&layers).enumerate() {
            if l.weight.dim() != (*out, *fan_in) || l.bias.len() != *out {
                return Err(Error::invalid(format!(
                    "layer {i}: expected {out}x{fan_in} weight and {out} bias, got {:?} and {}",
                    l.weight.dim(),
                    l.bias.len()
                )));
            }
        }
        let layers = layers
            .into_iter()
            .map(|l| Layer {
                weight: l.weight.as_standard_layout().into_owned(),
                bias: l.bias,
            })
            .collect();
        Ok(NetState {
            config,
            layers,
            version: 0,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to the layers; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Flattened tensors in checkpoint order: `W0, b0, W1, b1, ...`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        flat_tensors(&self.layers)
    }

    /// Mutable flattened tensors with their roles; invalidates caches.
    pub fn tensors_mut(&mut self) -> Vec<(TensorKind, &mut [f64])> {
        self.version += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    (
                        TensorKind::Weight,
                        l.weight.as_slice_mut().expect("standard layout"),
                    ),
                    (
                        TensorKind::Bias,
                        l.bias.as_slice_mut().expect("standard layout"),
                    ),
                ]
            })
            .collect()
    }

    fn check_input(&self, inputs: &ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.config.input_dim {
            return Err(Error::invalid(format!(
                "input width {} does not match input_dim {}",
                inputs.ncols(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Logits without dropout. Safe to call concurrently on a shared state.
    pub fn forward_eval(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&inputs)?;
        let last = self.layers.len() - 1;
        let mut act = inputs.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = act.dot(&layer.weight.t());
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            act = z;
        }
        Ok(act)
    }

    /// Logits with inverted dropout on hidden activations, plus the cache
    /// needed by [`NetState::backward`].
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        inputs: ArrayView2<f64>,
        rng: &mut R,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&inputs)?;
        let rate = self.config.dropout_rate;
        let keep_scale = 1.0 / (1.0 - rate);
        let last = self.layers.len() - 1;
        let mut cache = ForwardCache {
            version: self.version,
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(last),
            masks: Vec::with_capacity(last),
        };
        let mut act = inputs.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = act.dot(&layer.weight.t());
            z += &layer.bias;
            cache.inputs.push(act);
            if i == last {
                return Ok((z, cache));
            }
            let mut h = z.mapv(|v| v.max(0.0));
            let mask = (rate > 0.0).then(|| {
                Array2::from_shape_simple_fn(h.raw_dim(), || {
                    if rng.gen::<f64>() < rate {
                        0.0
                    } else {
                        keep_scale
                    }
                })
            });
            if let Some(m) = &mask {
                h *= m;
            }
            cache.pre_activations.push(z);
            cache.masks.push(mask);
            act = h;
        }
        unreachable!("network has at least one layer")
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        inputs: ArrayView2<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Option<ForwardCache>)> {
        match mode {
            Mode::Eval => Ok((self.forward_eval(inputs)?, None)),
            Mode::Train => {
                let (logits, cache) = self.forward_train(inputs, rng)?;
                Ok((logits, Some(cache)))
            }
        }
    }

    /// Parameter gradients given `d loss / d logits` for the cached batch.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: ArrayView2<f64>) -> Result<NetGrads> {
        if cache.version != self.version {
            return Err(Error::Contract(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::Contract(
                "forward cache does not match this network".into(),
            ));
        }
        let batch = cache.inputs[0].nrows();
        if grad_logits.dim() != (batch, self.config.num_classes) {
            return Err(Error::invalid(format!(
                "grad_logits shape {:?}, expected ({batch}, {})",
                grad_logits.dim(),
                self.config.num_classes
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_logits.to_owned();
        for i in (0..self.layers.len()).rev() {
            let input = &cache.inputs[i];
            let weight = delta.t().dot(input).as_standard_layout().into_owned();
            let bias = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut d_in = delta.dot(&self.layers[i].weight);
                if let Some(m) = &cache.masks[i - 1] {
                    d_in *= m;
                }
                ndarray::Zip::from(&mut d_in)
                    .and(&cache.pre_activations[i - 1])
                    .for_each(|d, z| {
                        if *z <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = d_in;
            }
            grads.push(Layer { weight, bias });
        }
        grads.reverse();
        Ok(NetGrads { layers: grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn config(input: usize, hidden: Vec<usize>, classes: usize, dropout: f64) -> NetConfig {
        NetConfig {
            input_dim: input,
            hidden_dims: hidden,
            num_classes: classes,
            dropout_rate: dropout,
            seed: 7,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = NetState::init(config(10, vec![6, 5], 3, 0.1)).unwrap();
        let b = NetState::init(config(10, vec![6, 5], 3, 0.1)).unwrap();
        assert_eq!(a, b);
        let mut c = config(10, vec![6, 5], 3, 0.1);
        c.seed = 8;
        assert_ne!(a, NetState::init(c).unwrap());
    }

    #[test]
    fn linear_shapes_and_bounds() {
        let s = NetState::init(config(4, vec![], 3, 0.0)).unwrap();
        assert_eq!(s.layers().len(), 1);
        assert_eq!(s.layers()[0].weight.dim(), (3, 4));
        assert_eq!(s.layers()[0].bias, Array1::<f64>::zeros(3));
        assert!((he_uniform_bound(784) - 0.08748).abs() < 1e-5);
        let s = NetState::init(config(784, vec![16], 3, 0.0)).unwrap();
        let bound = he_uniform_bound(784);
        assert!(s.layers()[0].weight.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(NetState::init(config(4, vec![0], 3, 0.0)).is_err());
        assert!(NetState::init(config(0, vec![], 3, 0.0)).is_err());
        assert!(NetState::init(config(4, vec![], 1, 0.0)).is_err());
        assert!(NetState::init(config(4, vec![], 3, 1.0)).is_err());
    }

    #[test]
    fn forward_examples() {
        let cfg = config(2, vec![], 2, 0.0);
        let s = NetState::from_layers(
            cfg,
            vec![Layer {
                weight: array![[1.0, 0.0], [0.0, 1.0]],
                bias: array![0.5, -0.5],
            }],
        )
        .unwrap();
        let out = s.forward_eval(array![[1.0, 2.0]].view()).unwrap();
        assert_eq!(out, array![[1.5, 1.5]]);

        let mut s = NetState::init(config(3, vec![4], 2, 0.0)).unwrap();
        for (_, t) in s.tensors_mut() {
            t.fill(0.0);
        }
        let out = s.forward_eval(array![[1.0, -2.0, 3.0]].view()).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn train_without_dropout_matches_eval() {
        let s = NetState::init(config(5, vec![7, 3], 4, 0.0)).unwrap();
        let x = Array2::from_shape_fn((3, 5), |(i, j)| (i as f64 - j as f64) * 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (train, _) = s.forward_train(x.view(), &mut rng).unwrap();
        assert_eq!(train, s.forward_eval(x.view()).unwrap());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let s = NetState::init(config(5, vec![], 4, 0.0)).unwrap();
        assert!(matches!(
            s.forward_eval(Array2::zeros((1, 4)).view()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn backward_basics() {
        let s = NetState::init(config(3, vec![4], 2, 0.3)).unwrap();
        let x = array![[0.2, -0.4, 0.9]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, cache) = s.forward_train(x.view(), &mut rng).unwrap();
        let g = s.backward(&cache, Array2::zeros((1, 2)).view()).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));

        // linear model, one sample: grad_W = outer(grad_logits, input)
        let lin = NetState::init(config(3, vec![], 2, 0.0)).unwrap();
        let (_, cache) = lin.forward_train(x.view(), &mut rng).unwrap();
        let gl = array![[0.25, -0.75]];
        let g = lin.backward(&cache, gl.view()).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(g.layers[0].weight[[r, c]], gl[[0, r]] * x[[0, c]]);
            }
        }
        assert_eq!(g.layers[0].bias, array![0.25, -0.75]);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut s = NetState::init(config(3, vec![2], 2, 0.0)).unwrap();
        let x = array![[0.2, -0.4, 0.9]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, cache) = s.forward_train(x.view(), &mut rng).unwrap();
        s.layers_mut()[0].bias[0] = 1.0;
        assert!(matches!(
            s.backward(&cache, Array2::zeros((1, 2)).view()),
            Err(Error::Contract(_))
        ));
    }
}
