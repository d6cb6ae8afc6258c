//! Tree-wise weighting network: one `1 -> H -> 1` network per tree mapping
//! that tree's loss to a weight in `(0, 1)`.
//!
//! Per-tree parameters are laid out contiguously as `[w1 (H), b1 (H), w2 (H), b2]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MorfError, Result};
use crate::forest::sigmoid;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightNetConfig {
    pub hidden: usize,
    pub seed: u64,
}

impl Default for WeightNetConfig {
    fn default() -> Self {
        Self {
            hidden: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightNet {
    hidden: usize,
    trees: usize,
    pub params: ParamStore,
}

#[derive(Debug, Clone)]
pub struct WeightCache {
    tree: usize,
    params_version: u64,
    loss: f64,
    pre: Vec<f64>,
    weight: f64,
}

impl WeightCache {
    pub fn weight(&self) -> f64 {
        self.weight
    }
}

/// `c = V(R) + R * dV/dR(R)` (the factor multiplying `dR/dtheta` in the
/// gradient of `V(R) * R`), plus its gradient with respect to `phi_t`.
#[derive(Debug, Clone)]
pub struct Coefficient {
    pub weight: f64,
    pub value: f64,
    pub grad: Vec<f64>,
}

impl WeightNet {
    pub fn new(trees: usize, config: &WeightNetConfig) -> Result<Self> {
        if config.hidden == 0 || trees == 0 {
            return Err(MorfError::Config(
                "weight net needs hidden units and trees".into(),
            ));
        }
        let h = config.hidden;
        let per_tree = 3 * h + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut values = vec![0.0; trees * per_tree];
        let b1 = (6.0 / (1 + h) as f64).sqrt();
        for chunk in values.chunks_mut(per_tree) {
            for w in &mut chunk[..h] {
                *w = rng.random_range(-b1..b1);
            }
            for w in &mut chunk[2 * h..3 * h] {
                *w = rng.random_range(-b1..b1);
            }
        }
        Ok(Self {
            hidden: h,
            trees,
            params: ParamStore::new(values),
        })
    }

    pub fn from_params(trees: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        if hidden == 0 || trees == 0 || params.len() != trees * (3 * hidden + 1) {
            return Err(MorfError::Schema(
                "weight net parameter count mismatch".into(),
            ));
        }
        Ok(Self {
            hidden,
            trees,
            params: ParamStore::new(params),
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn trees(&self) -> usize {
        self.trees
    }

    pub fn per_tree(&self) -> usize {
        3 * self.hidden + 1
    }

    /// Parameter range of tree `t` inside the flat store.
    pub fn range(&self, t: usize) -> std::ops::Range<usize> {
        t * self.per_tree()..(t + 1) * self.per_tree()
    }

    fn tree_params(&self, t: usize) -> Result<&[f64]> {
        if t >= self.trees {
            return Err(MorfError::InvalidInput(format!(
                "tree index {t} out of range for {} trees",
                self.trees
            )));
        }
        Ok(&self.params.as_slice()[self.range(t)])
    }

    pub fn weight(&self, t: usize, loss: f64) -> Result<(f64, WeightCache)> {
        if !loss.is_finite() {
            return Err(MorfError::InvalidInput(format!("non-finite loss {loss}")));
        }
        let phi = self.tree_params(t)?;
        let h = self.hidden;
        let (w1, rest) = phi.split_at(h);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h);
        let pre: Vec<f64> = w1.iter().zip(b1).map(|(w, b)| w * loss + b).collect();
        let z: f64 = pre.iter().zip(w2).map(|(a, w)| a.max(0.0) * w).sum::<f64>() + b2[0];
        let weight = sigmoid(z);
        Ok((
            weight,
            WeightCache {
                tree: t,
                params_version: self.params.version(),
                loss,
                pre,
                weight,
            },
        ))
    }

    /// Accumulates `upstream * dV/dphi_t` into `grad` (the full flat layout)
    /// and returns `upstream * dV/dloss`.
    pub fn weight_gradients(
        &self,
        upstream: f64,
        cache: &WeightCache,
        grad: &mut [f64],
    ) -> Result<f64> {
        if cache.params_version != self.params.version() || cache.pre.len() != self.hidden {
            return Err(MorfError::InvalidState(
                "weight-net cache does not match the current parameters".into(),
            ));
        }
        if grad.len() != self.params.len() {
            return Err(MorfError::InputShape {
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        let h = self.hidden;
        let range = self.range(cache.tree);
        let phi = &self.params.as_slice()[range.clone()];
        let g = &mut grad[range];
        let dz = upstream * cache.weight * (1.0 - cache.weight);
        let mut d_loss = 0.0;
        for j in 0..h {
            let a = cache.pre[j];
            let w1 = phi[j];
            let w2 = phi[2 * h + j];
            g[2 * h + j] += dz * a.max(0.0);
            if a > 0.0 {
                g[j] += dz * w2 * cache.loss;
                g[h + j] += dz * w2;
                d_loss += dz * w2 * w1;
            }
        }
        g[3 * h] += dz;
        Ok(d_loss)
    }

    /// Gradient coefficient of `V_t(R) * R` with respect to `R`, and its
    /// derivative with respect to the tree's parameters.
    ///
    /// With `truncated` the path through the network's input is dropped and
    /// the coefficient is just `V_t(R)`.
    pub fn coefficient(&self, t: usize, loss: f64, truncated: bool) -> Result<Coefficient> {
        let (v, cache) = self.weight(t, loss)?;
        let phi = self.tree_params(t)?;
        let h = self.hidden;
        let ds = v * (1.0 - v);
        let dds = ds * (1.0 - 2.0 * v);
        // q = dz/dR
        let mut q = 0.0;
        for j in 0..h {
            if cache.pre[j] > 0.0 {
                q += phi[2 * h + j] * phi[j];
            }
        }
        let mut grad = vec![0.0; self.per_tree()];
        let value = if truncated { v } else { v + loss * ds * q };
        // dc/dp = s' dz/dp + R (s'' q dz/dp + s' dq/dp); truncated keeps the first term
        let dz_scale = if truncated { ds } else { ds + loss * dds * q };
        for j in 0..h {
            let a = cache.pre[j];
            let w1 = phi[j];
            let w2 = phi[2 * h + j];
            grad[2 * h + j] = dz_scale * a.max(0.0);
            if a > 0.0 {
                grad[j] = dz_scale * w2 * loss;
                grad[h + j] = dz_scale * w2;
                if !truncated {
                    grad[j] += loss * ds * w2;
                    grad[2 * h + j] += loss * ds * w1;
                }
            }
        }
        grad[3 * h] = dz_scale;
        Ok(Coefficient {
            weight: v,
            value,
            grad,
        })
    }
}
