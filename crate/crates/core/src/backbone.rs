//! Dense feature extractor producing the feature vector the forest splits on.
//!
//! Hidden layers apply the configured activation; the final layer is linear
//! so the raw coordinates feed the split sigmoids directly. Parameters live
//! in one flat [`ParamStore`]: for each layer, a row-major `out x in` weight
//! block followed by `out` biases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MorfError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and the output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = MorfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            other => Err(MorfError::Config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl BackboneConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![64],
            feature_dim: 256,
            activation: Activation::Relu,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    biases: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    layers: Vec<Layer>,
    param_count: usize,
}

/// Intermediates of one forward pass, consumed by [`Backbone::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    params_version: u64,
    /// `activations[0]` is the input; `activations[i + 1]` the output of layer `i`.
    activations: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }

    pub fn output(&self) -> &[f64] {
        self.activations
            .last()
            .expect("cache has at least the input")
    }
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        if config.input_dim == 0 || config.feature_dim == 0 || config.hidden_dims.contains(&0) {
            return Err(MorfError::Config(
                "backbone dimensions must all be at least 1".into(),
            ));
        }
        let mut dims = vec![config.input_dim];
        dims.extend(&config.hidden_dims);
        dims.push(config.feature_dim);
        let mut offset = 0;
        let layers = dims
            .windows(2)
            .map(|w| {
                let layer = Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    weights: offset,
                    biases: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                layer
            })
            .collect();
        Ok(Self {
            config,
            layers,
            param_count: offset,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Uniform `[-a, a]` weights with `a = sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init_params(&self) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.init_seed);
        let mut values = vec![0.0; self.param_count];
        for layer in &self.layers {
            let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for w in &mut values[layer.weights..layer.biases] {
                *w = rng.random_range(-bound..bound);
            }
        }
        ParamStore::new(values)
    }

    fn check_params(&self, params: &ParamStore) -> Result<()> {
        if params.len() != self.param_count {
            return Err(MorfError::InputShape {
                expected: self.param_count,
                got: params.len(),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(MorfError::InputShape {
                expected: self.config.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn is_last(&self, index: usize) -> bool {
        index + 1 == self.layers.len()
    }

    pub fn forward(&self, params: &ParamStore, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_params(params)?;
        self.check_input(x)?;
        let theta = params.as_slice();
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        for (index, layer) in self.layers.iter().enumerate() {
            let input = activations.last().expect("input pushed");
            let z = affine(theta, layer, input);
            let a = if self.is_last(index) {
                z.clone()
            } else {
                z.iter().map(|&v| self.config.activation.apply(v)).collect()
            };
            pre_activations.push(z);
            activations.push(a);
        }
        let out = activations.last().expect("at least one layer").clone();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(MorfError::numeric("non-finite backbone output"));
        }
        Ok((
            out,
            ForwardCache {
                params_version: params.version(),
                activations,
                pre_activations,
            },
        ))
    }

    /// Forward pass without retaining intermediates.
    pub fn features(&self, params: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_input(x)?;
        let theta = params.as_slice();
        let mut current = x.to_vec();
        for (index, layer) in self.layers.iter().enumerate() {
            let mut z = affine(theta, layer, &current);
            if !self.is_last(index) {
                z.iter_mut()
                    .for_each(|v| *v = self.config.activation.apply(*v));
            }
            current = z;
        }
        Ok(current)
    }

    /// Accumulates the parameter gradient into `grad_params` and returns the
    /// gradient with respect to the input.
    pub fn backward(
        &self,
        params: &ParamStore,
        cache: &ForwardCache,
        upstream: &[f64],
        grad_params: &mut [f64],
    ) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if cache.params_version != params.version()
            || cache.activations.len() != self.layers.len() + 1
        {
            return Err(MorfError::InvalidState(
                "backbone cache does not match the current parameters".into(),
            ));
        }
        if upstream.len() != self.config.feature_dim {
            return Err(MorfError::InputShape {
                expected: self.config.feature_dim,
                got: upstream.len(),
            });
        }
        if grad_params.len() != self.param_count {
            return Err(MorfError::InputShape {
                expected: self.param_count,
                got: grad_params.len(),
            });
        }
        let theta = params.as_slice();
        let mut delta = upstream.to_vec();
        for (index, layer) in self.layers.iter().enumerate().rev() {
            if !self.is_last(index) {
                let z = &cache.pre_activations[index];
                let a = &cache.activations[index + 1];
                for ((d, &zi), &ai) in delta.iter_mut().zip(z).zip(a) {
                    *d *= self.config.activation.derivative(zi, ai);
                }
            }
            let input = &cache.activations[index];
            let mut grad_input = vec![0.0; layer.fan_in];
            for (j, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = layer.weights + j * layer.fan_in;
                let grad_row = &mut grad_params[row..row + layer.fan_in];
                for (g, &xi) in grad_row.iter_mut().zip(input) {
                    *g += d * xi;
                }
                for (gi, &w) in grad_input.iter_mut().zip(&theta[row..row + layer.fan_in]) {
                    *gi += d * w;
                }
                grad_params[layer.biases + j] += d;
            }
            delta = grad_input;
        }
        Ok(delta)
    }

    /// Forward pass together with the directional derivative of the output
    /// along `tangent` in parameter space.
    pub fn jvp(
        &self,
        params: &ParamStore,
        x: &[f64],
        tangent: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_params(params)?;
        self.check_input(x)?;
        if tangent.len() != self.param_count {
            return Err(MorfError::InputShape {
                expected: self.param_count,
                got: tangent.len(),
            });
        }
        let theta = params.as_slice();
        let mut value = x.to_vec();
        let mut dot = vec![0.0; x.len()];
        for (index, layer) in self.layers.iter().enumerate() {
            let z = affine(theta, layer, &value);
            // d(Wx + b) = dW x + W dx + db
            let mut dz = affine(tangent, layer, &value);
            let w_dx = linear(theta, layer, &dot);
            dz.iter_mut().zip(&w_dx).for_each(|(a, b)| *a += b);
            if self.is_last(index) {
                value = z;
                dot = dz;
            } else {
                let act = self.config.activation;
                let a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
                dot = dz
                    .iter()
                    .zip(&z)
                    .zip(&a)
                    .map(|((d, &zi), &ai)| d * act.derivative(zi, ai))
                    .collect();
                value = a;
            }
        }
        Ok((value, dot))
    }
}

fn linear(theta: &[f64], layer: &Layer, input: &[f64]) -> Vec<f64> {
    (0..layer.fan_out)
        .map(|j| {
            let row = layer.weights + j * layer.fan_in;
            theta[row..row + layer.fan_in]
                .iter()
                .zip(input)
                .map(|(w, x)| w * x)
                .sum()
        })
        .collect()
}

fn affine(theta: &[f64], layer: &Layer, input: &[f64]) -> Vec<f64> {
    let mut out = linear(theta, layer, input);
    for (j, o) in out.iter_mut().enumerate() {
        *o += theta[layer.biases + j];
    }
    out
}
