//! Dense ReLU networks with hand-written reverse mode.
//!
//! Batches are row-major `(batch, features)`. Layer weights are stored as
//! `(inputs, outputs)` so a layer is `x · W + b`.

mod adam;
mod checkpoint;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_weights, read_weights, save_weights, write_weights, MAGIC};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("network needs at least two layer sizes, got {0:?}")]
    Spec(Vec<usize>),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("forward cache is stale (weights version {cache} vs {weights})")]
    StaleCache { cache: u64, weights: u64 },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Layer widths from input to output. Hidden layers use ReLU, the output
/// layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_sizes: &[usize]) -> Result<Self, NnError> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(NnError::Spec(layer_sizes.to_vec()));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
        })
    }

    /// `input → 256 → 256 → output`, the shape of every network in the study.
    pub fn standard(input: usize, output: usize) -> Self {
        Self {
            layer_sizes: vec![input, 256, 256, output],
        }
    }

    pub fn input(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }
}

/// What a network is for; stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    QNetwork,
    Actor,
    Critic,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::QNetwork => "q_network",
            Role::Actor => "actor",
            Role::Critic => "critic",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Role> {
        [Role::QNetwork, Role::Actor, Role::Critic]
            .into_iter()
            .find(|r| r.tag() == tag)
    }
}

/// MLP parameters plus the metadata written to checkpoints.
///
/// `version` counts optimizer updates applied to these weights; forward
/// caches remember it so a stale cache cannot be back-propagated.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyWeights {
    pub spec: MlpSpec,
    pub role: Role,
    pub layers: Vec<Dense>,
    pub version: u64,
}

/// Same shape tree as [`PolicyWeights::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

/// Activations of every layer from a forward pass; `activations[0]` is
/// the input and the last entry is the output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    activations: Vec<Array2<f32>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f32> {
        self.activations.last().unwrap()
    }
}

impl PolicyWeights {
    pub fn zeros(spec: MlpSpec, role: Role) -> Self {
        let layers = spec.layer_sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self {
            spec,
            role,
            layers,
            version: 0,
        }
    }

    /// Uniform fan-in init: `±sqrt(6/fan_in)` for ReLU layers, `±sqrt(3/fan_in)`
    /// for the linear output layer. Biases start at zero.
    pub fn init<R: Rng>(spec: MlpSpec, role: Role, rng: &mut R) -> Self {
        let mut w = Self::zeros(spec, role);
        let last = w.layers.len() - 1;
        for (i, layer) in w.layers.iter_mut().enumerate() {
            let fan_in = layer.weight.nrows() as f32;
            let gain = if i == last { 3.0 } else { 6.0 };
            let bound = (gain / fan_in).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).unwrap();
            layer.weight.mapv_inplace(|_| dist.sample(rng));
        }
        w
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, input: &ArrayView2<f32>) -> Result<(), NnError> {
        if input.ncols() != self.spec.input() {
            return Err(NnError::Shape {
                expected: format!("(_, {})", self.spec.input()),
                got: format!("{:?}", input.shape()),
            });
        }
        Ok(())
    }

    /// Forward pass keeping activations for [`backward`](Self::backward).
    pub fn forward(&self, input: ArrayView2<f32>) -> Result<ForwardCache, NnError> {
        self.check_input(&input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_owned());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = activations[i].dot(&layer.weight);
            z += &layer.bias;
            if i != last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            activations.push(z);
        }
        Ok(ForwardCache {
            version: self.version,
            activations,
        })
    }

    /// Forward pass without a cache.
    pub fn predict(&self, input: ArrayView2<f32>) -> Result<Array2<f32>, NnError> {
        self.check_input(&input)?;
        let last = self.layers.len() - 1;
        let mut x: Option<Array2<f32>> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = match &x {
                None => input.dot(&layer.weight),
                Some(a) => a.dot(&layer.weight),
            };
            z += &layer.bias;
            if i != last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            x = Some(z);
        }
        Ok(x.unwrap())
    }

    /// Exact gradients of `sum(upstream ⊙ output)` with respect to every
    /// parameter.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<f32>) -> Result<Gradients, NnError> {
        if cache.version != self.version {
            return Err(NnError::StaleCache {
                cache: cache.version,
                weights: self.version,
            });
        }
        if cache.activations.len() != self.layers.len() + 1
            || cache
                .activations
                .iter()
                .zip(&self.spec.layer_sizes)
                .any(|(a, &n)| a.ncols() != n)
        {
            return Err(NnError::Shape {
                expected: format!("cache for {:?}", self.spec.layer_sizes),
                got: format!("{} cached layers", cache.activations.len()),
            });
        }
        if upstream.raw_dim() != cache.output().raw_dim() {
            return Err(NnError::Shape {
                expected: format!("{:?}", cache.output().shape()),
                got: format!("{:?}", upstream.shape()),
            });
        }
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut dz = upstream.to_owned();
        for i in (0..self.layers.len()).rev() {
            let a = &cache.activations[i];
            let weight = a.t().dot(&dz);
            let bias = dz.sum_axis(Axis(0));
            if i > 0 {
                let mut da = dz.dot(&self.layers[i].weight.t());
                Zip::from(&mut da).and(a).for_each(|g, &act| {
                    if act <= 0.0 {
                        *g = 0.0;
                    }
                });
                dz = da;
            }
            grads.push(Dense { weight, bias });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// Flat parameter view in checkpoint order: per layer, weights
    /// (row-major) then biases.
    pub fn flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.spec.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f32]) -> Result<(), NnError> {
        if values.len() != self.spec.param_count() {
            return Err(NnError::Shape {
                expected: format!("{} parameters", self.spec.param_count()),
                got: format!("{}", values.len()),
            });
        }
        let mut it = values.iter();
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|p| *p = *it.next().unwrap());
        }
        Ok(())
    }
}

impl Gradients {
    pub fn zeros_like(weights: &PolicyWeights) -> Self {
        Self {
            layers: weights
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f32> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut f32> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn flat(&self) -> Vec<f32> {
        self.iter().copied().collect()
    }

    pub fn sum_squares(&self) -> f64 {
        self.iter().map(|&g| f64::from(g) * f64::from(g)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }

    pub fn scale(&mut self, s: f32) {
        self.iter_mut().for_each(|g| *g *= s);
    }

    /// Clips to `max_norm` in global L2 norm; returns the applied scale.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        clip_grad_norm(&mut [self], max_norm)
    }

    fn congruent(&self, weights: &PolicyWeights) -> bool {
        self.layers.len() == weights.layers.len()
            && self
                .layers
                .iter()
                .zip(&weights.layers)
                .all(|(g, w)| g.weight.raw_dim() == w.weight.raw_dim() && g.bias.len() == w.bias.len())
    }
}

/// Rescales a group of gradients so their joint L2 norm is at most
/// `max_norm`. Returns `min(1, max_norm / norm)`.
pub fn clip_grad_norm(grads: &mut [&mut Gradients], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(scale as f32);
        }
        scale
    } else {
        1.0
    }
}
