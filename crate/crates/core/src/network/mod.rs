//! A small multilayer perceptron with hand-written backpropagation.
//!
//! Layers compute `y = x·W + b` with `W` stored as `inputs × outputs`.
//! Every layer output is addressable as a *tap*: `hidden1`, `hidden2`, …
//! for the post-activation hidden layers and `logits` for the last one.
//! Alignment losses attach to taps and inject their gradients there.

mod train;

pub use train::{
    Checkpoint, LossReport, MetricRecord, TrainConfig, TrainState, CHECKPOINT_VERSION,
};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::statistics::FeatureBatch;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid(format!("unknown activation '{other}'"))),
        }
    }
}

/// Fully connected classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    activation: Activation,
}

/// Parameter-shaped gradients (or velocities) of an [`MlpModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: model.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub(crate) fn matches(&self, model: &MlpModel) -> bool {
        self.weights.len() == model.weights.len()
            && self
                .weights
                .iter()
                .zip(&model.weights)
                .all(|(g, w)| g.dim() == w.dim())
            && self
                .biases
                .iter()
                .zip(&model.biases)
                .all(|(g, b)| g.len() == b.len())
    }
}

/// Cached layer values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl ForwardPass {
    /// Output of layer `index` (post-activation for hidden layers).
    pub fn tap(&self, index: usize) -> ArrayView2<'_, f64> {
        self.post[index].view()
    }

    pub fn logits(&self) -> ArrayView2<'_, f64> {
        self.post.last().expect("at least one layer").view()
    }

    pub fn rows(&self) -> usize {
        self.input.nrows()
    }
}

impl MlpModel {
    /// He-initialized weights and zero biases. `dims` lists the input
    /// width, every hidden width and the number of classes.
    pub fn new(dims: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        Self::check_dims(dims)?;
        let weights = dims
            .windows(2)
            .map(|w| {
                let std = (2.0 / w[0] as f64).sqrt();
                Array2::from_shape_fn((w[0], w[1]), |_| std * rng.sample::<f64, _>(StandardNormal))
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            biases: dims[1..].iter().map(|&n| Array1::zeros(n)).collect(),
            activation,
        })
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        Self::check_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            weights: dims.windows(2).map(|w| Array2::zeros((w[0], w[1]))).collect(),
            biases: dims[1..].iter().map(|&n| Array1::zeros(n)).collect(),
            activation,
        })
    }

    /// Builds a model from explicit parameters.
    pub fn from_parameters(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::invalid("need one bias per weight matrix"));
        }
        let mut dims = vec![weights[0].nrows()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.nrows() != *dims.last().unwrap() || w.ncols() != b.len() {
                return Err(Error::invalid("consecutive layer dimensions disagree"));
            }
            dims.push(w.ncols());
        }
        Self::check_dims(&dims)?;
        Ok(Self {
            dims,
            weights,
            biases,
            activation,
        })
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!(
                "layer dims must be at least [input, classes] and positive, got {dims:?}"
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn tap_names(&self) -> Vec<String> {
        (1..self.num_layers())
            .map(|i| format!("hidden{i}"))
            .chain(std::iter::once("logits".to_string()))
            .collect()
    }

    /// Resolves a tap name to a layer index. Besides the names from
    /// [`tap_names`](Self::tap_names), `last_hidden` is accepted.
    pub fn tap_index(&self, name: &str) -> Result<usize> {
        let layers = self.num_layers();
        let idx = match name {
            "logits" => Some(layers - 1),
            "last_hidden" if layers >= 2 => Some(layers - 2),
            _ => name
                .strip_prefix("hidden")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1 && n < layers)
                .map(|n| n - 1),
        };
        idx.ok_or_else(|| {
            Error::invalid(format!(
                "unknown tap '{name}', available: {}",
                self.tap_names().join(", ")
            ))
        })
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<ForwardPass> {
        if x.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "model expects {} input features, batch has {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let last = self.num_layers() - 1;
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(self.num_layers());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = match post.last() {
                Some(prev) => prev.dot(w),
                None => x.dot(w),
            } + b.view().insert_axis(Axis(0));
            let a = if l == last {
                z.clone()
            } else {
                z.mapv(|v| self.activation.apply(v))
            };
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardPass {
            input: x.to_owned(),
            pre,
            post,
        })
    }

    pub fn forward_batch(&self, batch: &FeatureBatch) -> Result<ForwardPass> {
        self.forward(&batch.data())
    }

    /// Backpropagates gradients injected at taps. `tap_grads[l]` is the
    /// gradient of the objective with respect to the output of layer `l`.
    pub fn backward(&self, pass: &ForwardPass, tap_grads: &[Option<Array2<f64>>]) -> Result<Gradients> {
        let layers = self.num_layers();
        if tap_grads.len() != layers {
            return Err(Error::invalid(format!(
                "expected {layers} tap gradients, got {}",
                tap_grads.len()
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut carried: Option<Array2<f64>> = None;
        for l in (0..layers).rev() {
            let mut g = match (&tap_grads[l], carried.take()) {
                (Some(t), Some(c)) => t + &c,
                (Some(t), None) => t.clone(),
                (None, Some(c)) => c,
                (None, None) => continue,
            };
            if g.dim() != pass.post[l].dim() {
                return Err(Error::invalid(format!(
                    "gradient at layer {l} has shape {:?}, output is {:?}",
                    g.dim(),
                    pass.post[l].dim()
                )));
            }
            if l != layers - 1 {
                ndarray::Zip::from(&mut g)
                    .and(&pass.pre[l])
                    .and(&pass.post[l])
                    .for_each(|g, &x, &y| *g *= self.activation.derivative(x, y));
            }
            let input = if l == 0 { pass.input.view() } else { pass.post[l - 1].view() };
            grads.weights[l] = input.t().dot(&g);
            grads.biases[l] = g.sum_axis(Axis(0));
            if l > 0 {
                carried = Some(g.dot(&self.weights[l].t()));
            }
        }
        Ok(grads)
    }

    pub fn predict(&self, x: &ArrayView2<f64>) -> Result<Vec<usize>> {
        let pass = self.forward(x)?;
        Ok(pass
            .logits()
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

/// Fraction of rows whose arg-max prediction equals the label.
pub fn evaluate(model: &MlpModel, data: &FeatureBatch) -> Result<f64> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::invalid("evaluation needs labeled data"))?;
    if labels.is_empty() {
        return Err(Error::invalid("evaluation on an empty batch"));
    }
    let predictions = model.predict(&data.data())?;
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v ← μ·v + g`, `θ ← θ − η·v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Gradients,
}

impl Sgd {
    pub fn new(model: &MlpModel, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("SGD momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: Gradients::zeros_like(model),
        })
    }

    pub fn velocity(&self) -> &Gradients {
        &self.velocity
    }

    pub fn step(&mut self, model: &mut MlpModel, grads: &Gradients) -> Result<()> {
        if !grads.matches(model) || !self.velocity.matches(model) {
            return Err(Error::invalid("gradient shapes do not match the model"));
        }
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((w, v), g) in model.weights.iter_mut().zip(&mut self.velocity.weights).zip(&grads.weights) {
            v.zip_mut_with(g, |v, g| *v = mu * *v + g);
            w.scaled_add(-lr, v);
        }
        for ((b, v), g) in model.biases.iter_mut().zip(&mut self.velocity.biases).zip(&grads.biases) {
            v.zip_mut_with(g, |v, g| *v = mu * *v + g);
            b.scaled_add(-lr, v);
        }
        Ok(())
    }
}
