//! Ordinal label space and conversions between class ranks, binary
//! threshold encodings and predicted threshold probabilities.
//!
//! A label `r_k` among `K` ordered classes is encoded as `K - 1` bits where
//! bit `k` (zero-based) is set iff the rank exceeds threshold `k + 1`.

use std::fmt;

use crate::error::{MorfError, Result};

/// A class rank `1..=K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OrdinalLabel {
    rank: usize,
    classes: usize,
}

impl OrdinalLabel {
    pub fn new(rank: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(MorfError::InvalidInput(format!(
                "an ordinal label space needs at least 2 classes, got {classes}"
            )));
        }
        if rank == 0 || rank > classes {
            return Err(MorfError::InvalidInput(format!(
                "rank {rank} outside 1..={classes}"
            )));
        }
        Ok(Self { rank, classes })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Zero-based class index, convenient for confusion matrices.
    pub fn index(&self) -> usize {
        self.rank - 1
    }

    /// Human-readable name; the three-class case uses the nodule aliases.
    pub fn name(&self) -> String {
        if self.classes == 3 {
            ["benign", "unsure", "malignant"][self.rank - 1].to_string()
        } else {
            format!("r{}", self.rank)
        }
    }
}

impl fmt::Display for OrdinalLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.rank)
    }
}

/// Binary threshold vector, monotone non-increasing by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrdinalEncoding {
    bits: Vec<u8>,
}

impl OrdinalEncoding {
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// The bits as `0.0` / `1.0` targets.
    pub fn as_targets(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(b)).collect()
    }
}

/// Predicted per-threshold probabilities `P(y > r_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrdinalDistribution {
    probs: Vec<f64>,
}

impl OrdinalDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(MorfError::InvalidInput("empty ordinal distribution".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(MorfError::InvalidInput(format!(
                "ordinal probability {p} outside [0, 1]"
            )));
        }
        Ok(Self { probs })
    }

    /// Wraps values already known to lie in `[0, 1]`.
    pub(crate) fn from_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn classes(&self) -> usize {
        self.probs.len() + 1
    }

    pub fn is_monotone(&self) -> bool {
        self.probs.windows(2).all(|w| w[0] >= w[1])
    }
}

impl From<&OrdinalEncoding> for OrdinalDistribution {
    fn from(enc: &OrdinalEncoding) -> Self {
        Self {
            probs: enc.as_targets(),
        }
    }
}

pub fn encode_label(y: OrdinalLabel) -> OrdinalEncoding {
    let bits = (1..y.classes()).map(|k| u8::from(y.rank() > k)).collect();
    OrdinalEncoding { bits }
}

/// Counts thresholds whose probability is strictly above one half.
pub fn decode_distribution(p: &OrdinalDistribution) -> OrdinalLabel {
    let exceeded = p.probs().iter().filter(|&&q| q > 0.5).count();
    OrdinalLabel {
        rank: 1 + exceeded,
        classes: p.classes(),
    }
}

/// Continuous rank `1 + sum_k P(y > r_k)`, in `[1, K]`.
pub fn expected_rank(p: &OrdinalDistribution) -> f64 {
    expected_rank_of(p.probs())
}

pub(crate) fn expected_rank_of(probs: &[f64]) -> f64 {
    1.0 + probs.iter().sum::<f64>()
}
