//! Small fully connected networks with hand-written backpropagation.
//!
//! Parameters live in one flat vector: for each layer the weight matrix in
//! row-major `(out, in)` order followed by its bias vector. Hidden layers use
//! the rectifier; the output layer is linear and the loss decides how it is
//! read (raw values for Huber regression, logits for softmax cross-entropy).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::OptimizerKind;

pub const MODEL_FORMAT: &str = "mlp";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch: expected {expected} values, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("Huber threshold kappa must be positive, got {0}")]
    InvalidKappa(f64),
    #[error("empty minibatch")]
    EmptyBatch,
    #[error("target {target} out of range for {outputs} outputs")]
    BadTarget { target: usize, outputs: usize },
    #[error("loss {loss:?} does not accept this target kind")]
    TargetKind { loss: Loss },
    #[error("non-finite {what} (first bad index {index})")]
    NonFinite { what: &'static str, index: usize },
    #[error("invalid model file: {0}")]
    Format(String),
}

/// Huber loss: `0.5 δ²` for `|δ| ≤ κ`, else `κ(|δ| − 0.5κ)`.
pub fn huber(delta: f64, kappa: f64) -> Result<f64, NeuralError> {
    if !(kappa > 0.0) {
        return Err(NeuralError::InvalidKappa(kappa));
    }
    let a = delta.abs();
    Ok(if a <= kappa { 0.5 * delta * delta } else { kappa * (a - 0.5 * kappa) })
}

/// Derivative of [`huber`] with respect to δ.
pub fn huber_grad(delta: f64, kappa: f64) -> f64 {
    delta.clamp(-kappa, kappa)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Loss {
    /// Regression of one selected output onto a value.
    Huber { kappa: f64 },
    /// Softmax over all outputs against a class label.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Value { output: usize, value: f64 },
    Class(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Serialized network: layer sizes plus the flat parameter array.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
}

impl TryFrom<ModelFile> for Mlp {
    type Error = NeuralError;
    fn try_from(f: ModelFile) -> Result<Self, NeuralError> {
        if f.format != MODEL_FORMAT || f.version != MODEL_VERSION {
            return Err(NeuralError::Format(format!("unsupported format {} v{}", f.format, f.version)));
        }
        Mlp::from_params(f.layer_sizes, f.params)
    }
}

impl From<Mlp> for ModelFile {
    fn from(m: Mlp) -> Self {
        ModelFile { format: MODEL_FORMAT.into(), version: MODEL_VERSION, layer_sizes: m.sizes, params: m.params }
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    /// Random network with weights and biases uniform in `±1/√fan_in`.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "need input and output sizes, all positive");
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[1] * w[0] + w[1] {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Mlp { sizes: sizes.to_vec(), params }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "need input and output sizes, all positive");
        Mlp { sizes: sizes.to_vec(), params: vec![0.0; param_count(sizes)] }
    }

    pub fn from_params(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self, NeuralError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NeuralError::Format(format!("bad layer sizes {sizes:?}")));
        }
        let expected = param_count(&sizes);
        if params.len() != expected {
            return Err(NeuralError::ShapeMismatch { expected, found: params.len() });
        }
        if let Some(index) = params.iter().position(|p| !p.is_finite()) {
            return Err(NeuralError::NonFinite { what: "parameter", index });
        }
        Ok(Mlp { sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Mutable views of layer `l`'s weights and biases.
    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (off, n_in, n_out) = self.layer_offset(l);
        let (w, rest) = self.params[off..].split_at_mut(n_out * n_in);
        (w, &mut rest[..n_out])
    }

    fn layer_offset(&self, l: usize) -> (usize, usize, usize) {
        let off = param_count(&self.sizes[..=l]);
        (off, self.sizes[l], self.sizes[l + 1])
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NeuralError> {
        if x.len() != self.input_len() {
            return Err(NeuralError::ShapeMismatch { expected: self.input_len(), found: x.len() });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        for l in 0..self.n_layers() {
            a = self.affine(l, &a);
            if l + 1 < self.n_layers() {
                a.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(a)
    }

    fn affine(&self, l: usize, a: &[f64]) -> Vec<f64> {
        let (off, n_in, n_out) = self.layer_offset(l);
        let w = &self.params[off..off + n_out * n_in];
        let b = &self.params[off + n_out * n_in..off + n_out * n_in + n_out];
        (0..n_out)
            .map(|o| {
                let row = &w[o * n_in..(o + 1) * n_in];
                b[o] + row.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>()
            })
            .collect()
    }

    /// Mean loss over the batch and its gradient in the flat parameter layout.
    pub fn loss_and_grad(&self, batch: &[Sample], loss: Loss) -> Result<(f64, Vec<f64>), NeuralError> {
        if batch.is_empty() {
            return Err(NeuralError::EmptyBatch);
        }
        if let Loss::Huber { kappa } = loss {
            if !(kappa > 0.0) {
                return Err(NeuralError::InvalidKappa(kappa));
            }
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        let n_layers = self.n_layers();
        for sample in batch {
            self.check_input(&sample.input)?;
            // activations[l] is the input to layer l
            let mut activations = Vec::with_capacity(n_layers + 1);
            activations.push(sample.input.clone());
            for l in 0..n_layers {
                let mut z = self.affine(l, &activations[l]);
                if l + 1 < n_layers {
                    z.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                activations.push(z);
            }
            let out = &activations[n_layers];
            let (value, mut delta) = self.head(out, &sample.target, loss)?;
            total += value;

            for l in (0..n_layers).rev() {
                let (off, n_in, n_out) = self.layer_offset(l);
                let a_in = &activations[l];
                for o in 0..n_out {
                    let d = delta[o] * scale;
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                    for (g, ai) in row.iter_mut().zip(a_in) {
                        *g += d * ai;
                    }
                    grad[off + n_out * n_in + o] += d;
                }
                if l > 0 {
                    let w = &self.params[off..off + n_out * n_in];
                    let mut back = vec![0.0; n_in];
                    for o in 0..n_out {
                        if delta[o] == 0.0 {
                            continue;
                        }
                        for (i, bi) in back.iter_mut().enumerate() {
                            *bi += w[o * n_in + i] * delta[o];
                        }
                    }
                    // rectifier derivative, read off the stored post-activation
                    for (bi, ai) in back.iter_mut().zip(a_in) {
                        if *ai <= 0.0 {
                            *bi = 0.0;
                        }
                    }
                    delta = back;
                }
            }
        }
        Ok((total * scale, grad))
    }

    fn head(&self, out: &[f64], target: &Target, loss: Loss) -> Result<(f64, Vec<f64>), NeuralError> {
        let outputs = out.len();
        match (loss, target) {
            (Loss::Huber { kappa }, &Target::Value { output, value }) => {
                if output >= outputs {
                    return Err(NeuralError::BadTarget { target: output, outputs });
                }
                let delta = value - out[output];
                let mut d = vec![0.0; outputs];
                d[output] = -huber_grad(delta, kappa);
                Ok((huber(delta, kappa)?, d))
            }
            (Loss::CrossEntropy, &Target::Class(c)) => {
                if c >= outputs {
                    return Err(NeuralError::BadTarget { target: c, outputs });
                }
                let p = softmax(out);
                let value = -p[c].max(f64::MIN_POSITIVE).ln();
                let mut d = p;
                d[c] -= 1.0;
                Ok((value, d))
            }
            (loss, _) => Err(NeuralError::TargetKind { loss }),
        }
    }

    /// One optimizer update on a minibatch. The parameters are left untouched
    /// when the loss or gradient is not finite.
    pub fn train_step(&mut self, batch: &[Sample], loss: Loss, opt: &mut Optimizer) -> Result<f64, NeuralError> {
        let (value, grad) = self.loss_and_grad(batch, loss)?;
        if !value.is_finite() {
            return Err(NeuralError::NonFinite { what: "loss", index: 0 });
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(NeuralError::NonFinite { what: "gradient", index });
        }
        opt.apply(&mut self.params, &grad);
        if let Some(index) = self.params.iter().position(|p| !p.is_finite()) {
            return Err(NeuralError::NonFinite { what: "parameter", index });
        }
        Ok(value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("network serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, NeuralError> {
        serde_json::from_str(s).map_err(|e| NeuralError::Format(e.to_string()))
    }
}

/// Gradient-descent state: plain SGD or Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer { kind, lr, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                if self.m.len() != params.len() {
                    self.m = vec![0.0; params.len()];
                    self.v = vec![0.0; params.len()];
                    self.t = 0;
                }
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for k in 0..params.len() {
                    self.m[k] = B1 * self.m[k] + (1.0 - B1) * grad[k];
                    self.v[k] = B2 * self.v[k] + (1.0 - B2) * grad[k] * grad[k];
                    let mh = self.m[k] / c1;
                    let vh = self.v[k] / c2;
                    params[k] -= self.lr * mh / (vh.sqrt() + EPS);
                }
            }
        }
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = k;
        }
    }
    best
}
