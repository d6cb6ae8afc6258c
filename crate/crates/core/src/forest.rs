//! Soft decision trees over backbone features with ordinal leaves.
//!
//! Split node `n` sends a sample left with probability
//! `s_n = sigmoid(f[assignment[n]])`. Split nodes are numbered breadth-first
//! from the root; leaves are numbered left to right. A tree's output is the
//! routing-weighted mixture of its leaf distributions, and the forest output
//! is the plain average over trees.

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{MorfError, Result};
use crate::isotonic::project_non_increasing;
use crate::ordinal::{OrdinalDistribution, OrdinalEncoding};
use crate::params::ParamStore;

/// Floor on the arguments of the logarithms in the cross-entropy.
pub const PROB_EPS: f64 = 1e-7;
/// Leaf entries are kept inside `[LEAF_EPS, 1 - LEAF_EPS]` after each update.
pub const LEAF_EPS: f64 = 1e-6;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeTopology {
    depth: usize,
    assignment: Vec<usize>,
}

impl TreeTopology {
    pub fn new(depth: usize, assignment: Vec<usize>, feature_dim: usize) -> Result<Self> {
        if depth == 0 || depth > 20 {
            return Err(MorfError::Config(format!(
                "tree depth {depth} outside 1..=20"
            )));
        }
        let splits = (1usize << depth) - 1;
        if assignment.len() != splits {
            return Err(MorfError::Config(format!(
                "depth {depth} needs {splits} split assignments, got {}",
                assignment.len()
            )));
        }
        if let Some(bad) = assignment.iter().find(|&&a| a >= feature_dim) {
            return Err(MorfError::Config(format!(
                "split assignment {bad} out of range for feature width {feature_dim}"
            )));
        }
        Ok(Self { depth, assignment })
    }

    /// Distinct feature coordinates drawn uniformly for every split node.
    pub fn random<R: Rng + ?Sized>(depth: usize, feature_dim: usize, rng: &mut R) -> Result<Self> {
        let splits = split_count(depth)?;
        if feature_dim < splits {
            return Err(MorfError::Config(format!(
                "feature width {feature_dim} is smaller than the {splits} split nodes of a depth-{depth} tree"
            )));
        }
        let assignment = index::sample(rng, feature_dim, splits).into_vec();
        Self::new(depth, assignment, feature_dim)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn split_count(&self) -> usize {
        self.assignment.len()
    }

    pub fn leaf_count(&self) -> usize {
        1 << self.depth
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }
}

pub fn split_count(depth: usize) -> Result<usize> {
    if depth == 0 || depth > 20 {
        return Err(MorfError::Config(format!(
            "tree depth {depth} outside 1..=20"
        )));
    }
    Ok((1usize << depth) - 1)
}

/// Per-leaf ordinal distributions, one row of `K - 1` entries per leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafDistributions {
    thresholds: usize,
    rows: Vec<f64>,
}

impl LeafDistributions {
    /// Every row starts at `0.5 - 0.01 k`.
    pub fn initial(leaves: usize, thresholds: usize) -> Self {
        let row: Vec<f64> = (0..thresholds).map(|k| 0.5 - 0.01 * k as f64).collect();
        Self {
            thresholds,
            rows: row.repeat(leaves),
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let thresholds = rows.first().map_or(0, Vec::len);
        if thresholds == 0 || rows.iter().any(|r| r.len() != thresholds) {
            return Err(MorfError::InvalidInput(
                "leaf rows must be nonempty and of equal length".into(),
            ));
        }
        let out = Self {
            thresholds,
            rows: rows.concat(),
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        for row in self.rows.chunks(self.thresholds) {
            if row
                .iter()
                .any(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
            {
                return Err(MorfError::InvalidInput(format!(
                    "leaf row {row:?} outside [0, 1]"
                )));
            }
            if row.windows(2).any(|w| w[0] < w[1]) {
                return Err(MorfError::InvalidInput(format!(
                    "leaf row {row:?} is not non-increasing"
                )));
            }
        }
        Ok(())
    }

    pub fn thresholds(&self) -> usize {
        self.thresholds
    }

    pub fn leaf_count(&self) -> usize {
        self.rows.len() / self.thresholds
    }

    pub fn row(&self, leaf: usize) -> &[f64] {
        &self.rows[leaf * self.thresholds..(leaf + 1) * self.thresholds]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.chunks(self.thresholds)
    }
}

/// Split activations and leaf probabilities of one routed sample.
#[derive(Debug, Clone)]
pub struct RouteCache {
    assignment: Vec<usize>,
    splits: Vec<f64>,
    leaf_probs: Vec<f64>,
}

impl RouteCache {
    pub fn split_activations(&self) -> &[f64] {
        &self.splits
    }

    pub fn leaf_probs(&self) -> &[f64] {
        &self.leaf_probs
    }

    fn check(&self, tree: &TreeTopology) -> Result<()> {
        if self.assignment != tree.assignment {
            return Err(MorfError::InvalidState(
                "routing cache was built for a different tree".into(),
            ));
        }
        Ok(())
    }
}

fn check_features(f: &[f64], tree: &TreeTopology) -> Result<()> {
    let needed = tree.assignment.iter().max().map_or(0, |m| m + 1);
    if f.len() < needed {
        return Err(MorfError::InputShape {
            expected: needed,
            got: f.len(),
        });
    }
    Ok(())
}

pub fn route(f: &[f64], tree: &TreeTopology) -> Result<RouteCache> {
    check_features(f, tree)?;
    let splits: Vec<f64> = tree.assignment.iter().map(|&j| sigmoid(f[j])).collect();
    let n = splits.len();
    let mut mass = vec![0.0; 2 * n + 1];
    mass[0] = 1.0;
    for (node, &s) in splits.iter().enumerate() {
        mass[2 * node + 1] = mass[node] * s;
        mass[2 * node + 2] = mass[node] * (1.0 - s);
    }
    Ok(RouteCache {
        assignment: tree.assignment.clone(),
        splits,
        leaf_probs: mass.split_off(n),
    })
}

fn mixture(leaf_probs: &[f64], leaves: &LeafDistributions) -> Vec<f64> {
    let mut g = vec![0.0; leaves.thresholds];
    for (p, row) in leaf_probs.iter().zip(leaves.rows()) {
        for (gk, pi) in g.iter_mut().zip(row) {
            *gk += p * pi;
        }
    }
    g.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    g
}

fn check_leaves(tree: &TreeTopology, leaves: &LeafDistributions) -> Result<()> {
    if leaves.leaf_count() != tree.leaf_count() {
        return Err(MorfError::InputShape {
            expected: tree.leaf_count(),
            got: leaves.leaf_count(),
        });
    }
    Ok(())
}

pub fn tree_predict(
    f: &[f64],
    tree: &TreeTopology,
    leaves: &LeafDistributions,
) -> Result<(OrdinalDistribution, RouteCache)> {
    check_leaves(tree, leaves)?;
    let cache = route(f, tree)?;
    let g = mixture(&cache.leaf_probs, leaves);
    Ok((OrdinalDistribution::from_unchecked(g), cache))
}

/// One tree of the forest: its split assignment and leaf distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftTree {
    pub topology: TreeTopology,
    pub leaves: LeafDistributions,
}

impl SoftTree {
    pub fn predict(&self, f: &[f64]) -> Result<(OrdinalDistribution, RouteCache)> {
        tree_predict(f, &self.topology, &self.leaves)
    }
}

/// Unweighted average of the trees' outputs.
pub fn forest_predict(f: &[f64], trees: &[SoftTree]) -> Result<OrdinalDistribution> {
    Ok(forest_predict_detailed(f, trees)?.forest)
}

#[derive(Debug, Clone)]
pub struct ForestPrediction {
    pub forest: OrdinalDistribution,
    pub trees: Vec<OrdinalDistribution>,
}

pub fn forest_predict_detailed(f: &[f64], trees: &[SoftTree]) -> Result<ForestPrediction> {
    let first = trees
        .first()
        .ok_or_else(|| MorfError::InvalidInput("forest has no trees".into()))?;
    let mut sum = vec![0.0; first.leaves.thresholds()];
    let mut per_tree = Vec::with_capacity(trees.len());
    for tree in trees {
        let (g, _) = tree.predict(f)?;
        for (s, v) in sum.iter_mut().zip(g.probs()) {
            *s += v;
        }
        per_tree.push(g);
    }
    let t = trees.len() as f64;
    let mean = sum.iter().map(|s| (s / t).clamp(0.0, 1.0)).collect();
    Ok(ForestPrediction {
        forest: OrdinalDistribution::from_unchecked(mean),
        trees: per_tree,
    })
}

/// Summed binary cross-entropy over the ordinal thresholds.
pub fn tree_loss(pred: &OrdinalDistribution, target: &OrdinalEncoding) -> f64 {
    tree_loss_with_grad(pred.probs(), &target.as_targets()).0
}

/// Loss and its derivative with respect to the prediction. Log arguments
/// are floored at [`PROB_EPS`]; the derivative is zero where the floor is active.
pub fn tree_loss_with_grad(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&g, &o)| {
            let mut d = 0.0;
            if o != 0.0 {
                loss -= o * g.max(PROB_EPS).ln();
                if g > PROB_EPS {
                    d -= o / g;
                }
            }
            if o != 1.0 {
                loss -= (1.0 - o) * (1.0 - g).max(PROB_EPS).ln();
                if 1.0 - g > PROB_EPS {
                    d += (1.0 - o) / (1.0 - g);
                }
            }
            d
        })
        .collect();
    (loss, grad)
}

/// Backpropagates `upstream = dLoss/dg` through the routing of one tree,
/// accumulating into `grad_f` (indexed like the feature vector).
pub fn split_gradients(
    upstream: &[f64],
    tree: &TreeTopology,
    leaves: &LeafDistributions,
    cache: &RouteCache,
    grad_f: &mut [f64],
) -> Result<()> {
    cache.check(tree)?;
    check_leaves(tree, leaves)?;
    check_features(grad_f, tree)?;
    if upstream.len() != leaves.thresholds() {
        return Err(MorfError::InputShape {
            expected: leaves.thresholds(),
            got: upstream.len(),
        });
    }
    let n = tree.split_count();
    // Subtree sums of p_l * dLoss/dp_l.
    let mut sums = vec![0.0; 2 * n + 1];
    for (l, (p, row)) in cache.leaf_probs.iter().zip(leaves.rows()).enumerate() {
        let dl_dp: f64 = upstream.iter().zip(row).map(|(u, pi)| u * pi).sum();
        sums[n + l] = p * dl_dp;
    }
    for node in (0..n).rev() {
        sums[node] = sums[2 * node + 1] + sums[2 * node + 2];
    }
    for (node, &s) in cache.splits.iter().enumerate() {
        grad_f[tree.assignment[node]] += sums[2 * node + 1] * (1.0 - s) - sums[2 * node + 2] * s;
    }
    Ok(())
}

/// Directional derivative of the tree output along a feature-space tangent.
pub fn tree_output_tangent(
    tangent_f: &[f64],
    tree: &TreeTopology,
    leaves: &LeafDistributions,
    cache: &RouteCache,
) -> Result<Vec<f64>> {
    cache.check(tree)?;
    check_leaves(tree, leaves)?;
    check_features(tangent_f, tree)?;
    let n = tree.split_count();
    let mut log_tangent = vec![0.0; 2 * n + 1];
    for (node, &s) in cache.splits.iter().enumerate() {
        let df = tangent_f[tree.assignment[node]];
        log_tangent[2 * node + 1] = log_tangent[node] + (1.0 - s) * df;
        log_tangent[2 * node + 2] = log_tangent[node] - s * df;
    }
    let mut dg = vec![0.0; leaves.thresholds()];
    for (l, (p, row)) in cache.leaf_probs.iter().zip(leaves.rows()).enumerate() {
        let dp = p * log_tangent[n + l];
        for (d, pi) in dg.iter_mut().zip(row) {
            *d += dp * pi;
        }
    }
    Ok(dg)
}

/// Result of the constrained leaf refresh for one tree.
#[derive(Debug, Clone)]
pub struct LeafUpdate {
    pub leaves: LeafDistributions,
    /// `log_likelihood[s][k]`: batch log-likelihood of threshold `k` before
    /// sweep `s`; the last entry is after the final sweep, pre-projection.
    pub log_likelihood: Vec<Vec<f64>>,
}

/// Fixed-point (EM) refresh of one tree's leaf distributions on a batch of
/// features, followed by projection of each row onto non-increasing
/// sequences.
pub fn update_leaf_distributions(
    features: &[Vec<f64>],
    targets: &[OrdinalEncoding],
    tree: &TreeTopology,
    leaves: &LeafDistributions,
    sweeps: usize,
) -> Result<LeafUpdate> {
    let probs = features
        .iter()
        .map(|f| route(f, tree).map(|c| c.leaf_probs))
        .collect::<Result<Vec<_>>>()?;
    update_from_routing(&probs, targets, leaves, sweeps)
}

pub(crate) fn update_from_routing(
    leaf_probs: &[Vec<f64>],
    targets: &[OrdinalEncoding],
    leaves: &LeafDistributions,
    sweeps: usize,
) -> Result<LeafUpdate> {
    if leaf_probs.is_empty() {
        return Err(MorfError::InvalidInput(
            "leaf update needs a nonempty batch".into(),
        ));
    }
    if leaf_probs.len() != targets.len() {
        return Err(MorfError::InputShape {
            expected: leaf_probs.len(),
            got: targets.len(),
        });
    }
    let thresholds = leaves.thresholds();
    if let Some(t) = targets.iter().find(|t| t.len() != thresholds) {
        return Err(MorfError::InputShape {
            expected: thresholds,
            got: t.len(),
        });
    }
    let leaf_count = leaves.leaf_count();
    let mass: Vec<f64> = (0..leaf_count)
        .map(|l| leaf_probs.iter().map(|p| p[l]).sum())
        .collect();

    let mut columns: Vec<Vec<f64>> = (0..thresholds)
        .map(|k| leaves.rows().map(|row| row[k]).collect())
        .collect();
    let mut log_likelihood = Vec::with_capacity(sweeps + 1);

    for sweep in 0..=sweeps {
        let mut record = Vec::with_capacity(thresholds);
        for (k, pi) in columns.iter_mut().enumerate() {
            let mut ll = 0.0;
            let mut pos = vec![0.0; leaf_count];
            let mut neg = vec![0.0; leaf_count];
            for (p, target) in leaf_probs.iter().zip(targets) {
                let g: f64 = p.iter().zip(pi.iter()).map(|(a, b)| a * b).sum();
                if target.bits()[k] == 1 {
                    ll += g.ln();
                    for l in 0..leaf_count {
                        let w = p[l] * pi[l];
                        if w > 0.0 {
                            pos[l] += w / g;
                        }
                    }
                } else {
                    ll += (1.0 - g).ln();
                    for l in 0..leaf_count {
                        let w = p[l] * (1.0 - pi[l]);
                        if w > 0.0 {
                            neg[l] += w / (1.0 - g);
                        }
                    }
                }
            }
            record.push(ll);
            if sweep == sweeps {
                continue;
            }
            for l in 0..leaf_count {
                let total = pos[l] + neg[l];
                if mass[l] > 1e-12 && total > 0.0 {
                    pi[l] = pos[l] / total;
                }
            }
        }
        log_likelihood.push(record);
    }

    let mut rows = Vec::with_capacity(leaf_count * thresholds);
    for l in 0..leaf_count {
        let mut row: Vec<f64> = columns.iter().map(|c| c[l]).collect();
        project_non_increasing(&mut row);
        rows.extend(row.into_iter().map(|v| v.clamp(LEAF_EPS, 1.0 - LEAF_EPS)));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(MorfError::numeric(
            "non-finite leaf distribution after update",
        ));
    }
    Ok(LeafUpdate {
        leaves: LeafDistributions { thresholds, rows },
        log_likelihood,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub trees: usize,
    pub depth: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 5,
            depth: 3,
            classes: 3,
            seed: 0,
        }
    }
}

/// Backbone plus the trees built on its features.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub backbone: Backbone,
    pub params: ParamStore,
    pub trees: Vec<SoftTree>,
    pub classes: usize,
}

impl ForestModel {
    pub fn new(backbone: BackboneConfig, forest: &ForestConfig) -> Result<Self> {
        if forest.trees == 0 {
            return Err(MorfError::Config("a forest needs at least one tree".into()));
        }
        if forest.classes < 2 {
            return Err(MorfError::Config(
                "at least two ordinal classes are required".into(),
            ));
        }
        let backbone = Backbone::new(backbone)?;
        let params = backbone.init_params();
        let mut rng = ChaCha8Rng::seed_from_u64(forest.seed);
        let trees = (0..forest.trees)
            .map(|_| {
                let topology =
                    TreeTopology::random(forest.depth, backbone.feature_dim(), &mut rng)?;
                let leaves = LeafDistributions::initial(topology.leaf_count(), forest.classes - 1);
                Ok(SoftTree { topology, leaves })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            backbone,
            params,
            trees,
            classes: forest.classes,
        })
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.backbone.features(&self.params, x)
    }

    pub fn predict(&self, x: &[f64]) -> Result<ForestPrediction> {
        let f = self.features(x)?;
        forest_predict_detailed(&f, &self.trees)
    }

    /// Refreshes every tree's leaves on the given samples.
    pub fn update_leaves(
        &mut self,
        inputs: &[&[f64]],
        targets: &[OrdinalEncoding],
        sweeps: usize,
    ) -> Result<Vec<LeafUpdate>> {
        let features = inputs
            .iter()
            .map(|x| self.features(x))
            .collect::<Result<Vec<_>>>()?;
        let mut reports = Vec::with_capacity(self.trees.len());
        for tree in &mut self.trees {
            let update = update_leaf_distributions(
                &features,
                targets,
                &tree.topology,
                &tree.leaves,
                sweeps,
            )?;
            tree.leaves = update.leaves.clone();
            reports.push(update);
        }
        Ok(reports)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.backbone.feature_dim();
        let first = self
            .trees
            .first()
            .ok_or_else(|| MorfError::Schema("model has no trees".into()))?;
        for tree in &self.trees {
            TreeTopology::new(tree.topology.depth, tree.topology.assignment.clone(), d)
                .map_err(|e| MorfError::Schema(e.to_string()))?;
            if tree.topology.depth != first.topology.depth {
                return Err(MorfError::Schema("trees differ in depth".into()));
            }
            check_leaves(&tree.topology, &tree.leaves)
                .map_err(|e| MorfError::Schema(e.to_string()))?;
            if tree.leaves.thresholds() + 1 != self.classes {
                return Err(MorfError::Schema(
                    "leaf width does not match class count".into(),
                ));
            }
            tree.leaves
                .validate()
                .map_err(|e| MorfError::Schema(e.to_string()))?;
        }
        if self.params.len() != self.backbone.param_count() || !self.params.is_finite() {
            return Err(MorfError::Schema(
                "backbone parameters are malformed".into(),
            ));
        }
        Ok(())
    }
}
