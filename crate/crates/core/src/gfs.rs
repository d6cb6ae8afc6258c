//! Grouped feature selection: rank feature coordinates by an activation
//! statistic, cut the ranking into one contiguous group per split node, and
//! let every split node of every tree draw its coordinate from its own group.

use rand::Rng;

use crate::error::{MorfError, Result};
use crate::forest::TreeTopology;

/// Disjoint groups of feature indices, highest-statistic group first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    groups: Vec<Vec<usize>>,
    feature_dim: usize,
}

impl GroupPartition {
    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }
}

/// Sorts indices by descending `feature_stats` (ties by ascending index) and
/// slices them into `split_count` groups; the first `D mod split_count`
/// groups are one larger.
pub fn partition_features(feature_stats: &[f64], split_count: usize) -> Result<GroupPartition> {
    let d = feature_stats.len();
    if split_count == 0 || d < split_count {
        return Err(MorfError::Config(format!(
            "cannot split {d} features into {split_count} groups"
        )));
    }
    if feature_stats.iter().any(|v| !v.is_finite()) {
        return Err(MorfError::numeric("non-finite feature statistic"));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        feature_stats[b]
            .total_cmp(&feature_stats[a])
            .then(a.cmp(&b))
    });
    let base = d / split_count;
    let extra = d % split_count;
    let mut groups = Vec::with_capacity(split_count);
    let mut start = 0;
    for g in 0..split_count {
        let size = base + usize::from(g < extra);
        groups.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(GroupPartition {
        groups,
        feature_dim: d,
    })
}

/// Mean absolute activation per coordinate over a batch of feature vectors.
pub fn mean_abs_activation(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = features
        .first()
        .ok_or_else(|| MorfError::InvalidInput("empty feature batch".into()))?;
    let mut stats = vec![0.0; first.len()];
    for f in features {
        if f.len() != stats.len() {
            return Err(MorfError::InputShape {
                expected: stats.len(),
                got: f.len(),
            });
        }
        for (s, v) in stats.iter_mut().zip(f) {
            *s += v.abs();
        }
    }
    let n = features.len() as f64;
    stats.iter_mut().for_each(|s| *s /= n);
    Ok(stats)
}

/// Draws one topology per tree; split node `n` (breadth-first) picks
/// uniformly from `groups[n]`.
pub fn sample_assignment<R: Rng + ?Sized>(
    partition: &GroupPartition,
    tree_count: usize,
    rng: &mut R,
) -> Result<Vec<TreeTopology>> {
    let splits = partition.groups.len();
    if !(splits + 1).is_power_of_two() {
        return Err(MorfError::Config(format!(
            "{splits} groups do not match a complete binary tree"
        )));
    }
    let depth = (splits + 1).trailing_zeros() as usize;
    (0..tree_count)
        .map(|_| {
            let assignment = partition
                .groups
                .iter()
                .map(|group| group[rng.random_range(0..group.len())])
                .collect();
            TreeTopology::new(depth, assignment, partition.feature_dim)
        })
        .collect()
}
