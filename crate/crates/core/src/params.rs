//! Flat parameter storage and first-order optimizers.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{MorfError, Result};

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// A flat vector of parameters tagged with a version that changes on every
/// mutable access, so caches built from an older state can be detected.
#[derive(Debug, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamStore {
    values: Vec<f64>,
    version: u64,
}

impl ParamStore {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            version: fresh_version(),
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.version = fresh_version();
        &mut self.values
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self + scale * direction`, as a new store.
    pub fn axpy(&self, scale: f64, direction: &[f64]) -> Result<ParamStore> {
        if direction.len() != self.values.len() {
            return Err(MorfError::InputShape {
                expected: self.values.len(),
                got: direction.len(),
            });
        }
        let values = self
            .values
            .iter()
            .zip(direction)
            .map(|(p, d)| p + scale * d)
            .collect();
        Ok(ParamStore::new(values))
    }
}

// Clones share values but not identity: a cache built against the original
// is not valid for a clone that may diverge.
impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self::new(self.values.clone())
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values
    }
}

impl From<Vec<f64>> for ParamStore {
    fn from(values: Vec<f64>) -> Self {
        Self::new(values)
    }
}

impl From<ParamStore> for Vec<f64> {
    fn from(store: ParamStore) -> Self {
        store.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = MorfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(MorfError::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam with L2 weight decay folded into the gradient, or plain SGD with
/// the same decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, len: usize, weight_decay: f64) -> Self {
        let moments = if kind == OptimizerKind::Adam { len } else { 0 };
        Self {
            kind,
            weight_decay,
            first: vec![0.0; moments],
            second: vec![0.0; moments],
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamStore, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != params.len() {
            return Err(MorfError::InputShape {
                expected: params.len(),
                got: grad.len(),
            });
        }
        self.steps += 1;
        let wd = self.weight_decay;
        let values = params.as_mut_slice();
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in values.iter_mut().zip(grad) {
                    *p -= lr * (g + wd * *p);
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let bias1 = 1.0 - ADAM_BETA1.powi(t);
                let bias2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, g), m), v) in values
                    .iter_mut()
                    .zip(grad)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    let g = g + wd * *p;
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MorfError::numeric(
                "non-finite parameter after optimizer step",
            ));
        }
        Ok(())
    }
}
