//! Training engines.
//!
//! MORF iteration on a mini-batch:
//!   1. forward the batch through the training forest, weigh each tree loss
//!      with its weight net and take a plain gradient step to get `theta'`;
//!   2. re-sample split assignments by grouped feature selection, evaluate
//!      the unweighted loss of that forest at `theta'`, and move `phi`
//!      along the exact gradient through the virtual step;
//!   3. recompute the weighted loss with the new `phi` and let the optimizer
//!      update `theta`.
//!
//! Leaf distributions stay fixed inside an iteration and are refreshed once
//! before training and after every epoch.
//!
//! DORF runs the same loop with unit weights and without steps 1 and 2.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Activation, Backbone, BackboneConfig, ForwardCache};
use crate::data::Dataset;
use crate::error::{MorfError, Result};
use crate::forest::{
    split_gradients, tree_loss_with_grad, tree_output_tangent, ForestConfig, ForestModel,
    RouteCache, SoftTree,
};
use crate::gfs::{mean_abs_activation, partition_features, sample_assignment};
use crate::metrics::tree_variance;
use crate::ordinal::{expected_rank_of, OrdinalEncoding};
use crate::params::{Optimizer, OptimizerKind, ParamStore};
use crate::twwnet::{WeightNet, WeightNetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Morf,
    Dorf,
}

impl std::str::FromStr for Method {
    type Err = MorfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "morf" => Ok(Self::Morf),
            "dorf" => Ok(Self::Dorf),
            other => Err(MorfError::Config(format!("unknown method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Morf => "morf",
            Method::Dorf => "dorf",
        })
    }
}

/// Which mini-batch the meta loss is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaBatchSource {
    #[default]
    Same,
    Next,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
    pub trees: usize,
    pub depth: usize,
    pub weight_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64],
            feature_dim: 256,
            activation: Activation::Relu,
            trees: 5,
            depth: 3,
            weight_hidden: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub meta_lr: f64,
    pub meta_optimizer: OptimizerKind,
    /// Step size of the virtual update; `None` uses the current learning rate.
    pub virtual_lr: Option<f64>,
    pub epochs: usize,
    pub seed: u64,
    pub leaf_update_sweeps: usize,
    /// Samples used for each leaf refresh; `None` uses the whole training set.
    pub leaf_update_samples: Option<usize>,
    pub meta_batch: MetaBatchSource,
    /// Drop the dependence of the tree weights on theta in the training gradient.
    pub truncate_weight_path: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            lr_decay: 0.1,
            lr_decay_every: 80,
            batch_size: 16,
            weight_decay: 0.0001,
            optimizer: OptimizerKind::Adam,
            meta_lr: 0.001,
            meta_optimizer: OptimizerKind::Sgd,
            virtual_lr: None,
            epochs: 20,
            seed: 0,
            leaf_update_sweeps: 20,
            leaf_update_samples: None,
            meta_batch: MetaBatchSource::Same,
            truncate_weight_path: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("lr_decay", self.lr_decay),
            ("meta_lr", self.meta_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(MorfError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(MorfError::Config(
                "weight_decay must be non-negative".into(),
            ));
        }
        if let Some(v) = self.virtual_lr {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(MorfError::Config("virtual_lr must be non-negative".into()));
            }
        }
        if self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(MorfError::Config(
                "batch_size and lr_decay_every must be at least 1".into(),
            ));
        }
        if self.leaf_update_samples == Some(0) {
            return Err(MorfError::Config(
                "leaf_update_samples must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch: step decay every `lr_decay_every` epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = (epoch / self.lr_decay_every) as i32;
        self.learning_rate * self.lr_decay.powi(drops)
    }
}

/// Independent seeds for the random streams of one run.
fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Inputs and encoded targets ready for training.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub encodings: Vec<OrdinalEncoding>,
    pub classes: usize,
}

impl TrainData {
    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(MorfError::InvalidInput("training set is empty".into()));
        }
        let encodings = dataset.encodings();
        Ok(Self {
            inputs: dataset.features.clone(),
            targets: encodings.iter().map(OrdinalEncoding::as_targets).collect(),
            encodings,
            classes: dataset.classes,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }
}

/// Forward state of one tree for one sample.
#[derive(Debug, Clone)]
pub struct TreeForward {
    pub route: RouteCache,
    pub output: Vec<f64>,
    pub loss: f64,
    pub loss_grad: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SampleForward {
    pub cache: ForwardCache,
    pub features: Vec<f64>,
    pub trees: Vec<TreeForward>,
}

/// Forward pass of a batch through the backbone and a set of trees.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub samples: Vec<SampleForward>,
}

impl BatchForward {
    /// `losses[i][t]`.
    pub fn losses(&self) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .map(|s| s.trees.iter().map(|t| t.loss).collect())
            .collect()
    }

    pub fn tree_count(&self) -> usize {
        self.samples.first().map_or(0, |s| s.trees.len())
    }

    /// Mean loss over samples and trees.
    pub fn mean_loss(&self) -> f64 {
        let n = (self.samples.len() * self.tree_count()) as f64;
        self.losses().iter().flatten().sum::<f64>() / n
    }

    /// Mean spread of per-tree expected ranks around their average.
    pub fn mean_tree_variance(&self) -> f64 {
        let total: f64 = self
            .samples
            .iter()
            .map(|s| {
                let ranks: Vec<f64> = s
                    .trees
                    .iter()
                    .map(|t| expected_rank_of(&t.output))
                    .collect();
                tree_variance(&ranks)
            })
            .sum();
        total / self.samples.len() as f64
    }
}

pub fn forward_batch(
    backbone: &Backbone,
    params: &ParamStore,
    trees: &[SoftTree],
    inputs: &[&[f64]],
    targets: &[&[f64]],
) -> Result<BatchForward> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(MorfError::InvalidInput(
            "batch must be nonempty with one target per input".into(),
        ));
    }
    let samples = inputs
        .iter()
        .zip(targets)
        .map(|(x, target)| {
            let (features, cache) = backbone.forward(params, x)?;
            let trees = trees
                .iter()
                .map(|tree| {
                    let (g, route) = tree.predict(&features)?;
                    let output = g.probs().to_vec();
                    let (loss, loss_grad) = tree_loss_with_grad(&output, target);
                    Ok(TreeForward {
                        route,
                        output,
                        loss,
                        loss_grad,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SampleForward {
                cache,
                features,
                trees,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchForward { samples })
}

/// `sum_i sum_t scale[i][t] * d loss_t^i / d theta`.
pub fn backbone_gradient(
    backbone: &Backbone,
    params: &ParamStore,
    trees: &[SoftTree],
    forward: &BatchForward,
    scale: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; backbone.param_count()];
    let mut grad_f = vec![0.0; backbone.feature_dim()];
    for (sample, scales) in forward.samples.iter().zip(scale) {
        grad_f.fill(0.0);
        for ((tree, tf), &c) in trees.iter().zip(&sample.trees).zip(scales) {
            if c == 0.0 {
                continue;
            }
            let upstream: Vec<f64> = tf.loss_grad.iter().map(|g| c * g).collect();
            split_gradients(
                &upstream,
                &tree.topology,
                &tree.leaves,
                &tf.route,
                &mut grad_f,
            )?;
        }
        backbone.backward(params, &sample.cache, &grad_f, &mut grad)?;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(MorfError::numeric("non-finite backbone gradient"));
    }
    Ok(grad)
}

/// How tree losses are weighted in the training objective.
#[derive(Debug, Clone, Copy)]
pub enum Weighting<'a> {
    /// Every tree weight is exactly one.
    Unit,
    Net {
        net: &'a WeightNet,
        truncated: bool,
    },
}

/// Weighted objective on a batch, with everything the gradients need.
#[derive(Debug, Clone)]
pub struct WeightedLoss {
    pub value: f64,
    pub losses: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    /// Factor multiplying `d loss / d theta` in `d(weight * loss) / d theta`.
    pub coefficients: Vec<Vec<f64>>,
    /// `d coefficient / d phi_t`, present for network weighting.
    pub coefficient_grads: Option<Vec<Vec<Vec<f64>>>>,
}

impl WeightedLoss {
    pub fn mean_weight_per_tree(&self) -> Vec<f64> {
        let n = self.weights.len() as f64;
        let trees = self.weights.first().map_or(0, Vec::len);
        (0..trees)
            .map(|t| self.weights.iter().map(|w| w[t]).sum::<f64>() / n)
            .collect()
    }

    /// Per-sample per-tree scale of `d loss / d theta` in the batch gradient.
    pub fn gradient_scale(&self) -> Vec<Vec<f64>> {
        let denom = (self.losses.len() * self.losses.first().map_or(0, Vec::len)) as f64;
        let inv = 1.0 / denom;
        self.coefficients
            .iter()
            .map(|row| row.iter().map(|c| c * inv).collect())
            .collect()
    }
}

/// `(1/N) sum_i (1/T) sum_t V_t(R_t^i) R_t^i`.
pub fn weighted_train_loss(losses: &[Vec<f64>], weighting: Weighting<'_>) -> Result<WeightedLoss> {
    let n = losses.len();
    let trees = losses.first().map_or(0, Vec::len);
    if n == 0 || trees == 0 {
        return Err(MorfError::InvalidInput("empty loss table".into()));
    }
    let mut weights = Vec::with_capacity(n);
    let mut coefficients = Vec::with_capacity(n);
    let mut grads = Vec::with_capacity(n);
    let mut total = 0.0;
    for row in losses {
        let mut w_row = Vec::with_capacity(trees);
        let mut c_row = Vec::with_capacity(trees);
        let mut g_row = Vec::with_capacity(trees);
        for (t, &r) in row.iter().enumerate() {
            match weighting {
                Weighting::Unit => {
                    w_row.push(1.0);
                    c_row.push(1.0);
                    total += r;
                }
                Weighting::Net { net, truncated } => {
                    let c = net.coefficient(t, r, truncated)?;
                    total += c.weight * r;
                    w_row.push(c.weight);
                    c_row.push(c.value);
                    g_row.push(c.grad);
                }
            }
        }
        weights.push(w_row);
        coefficients.push(c_row);
        grads.push(g_row);
    }
    Ok(WeightedLoss {
        value: total / (n * trees) as f64,
        losses: losses.to_vec(),
        weights,
        coefficients,
        coefficient_grads: match weighting {
            Weighting::Unit => None,
            Weighting::Net { .. } => Some(grads),
        },
    })
}

/// `theta - step * grad`; the input parameters are untouched.
pub fn virtual_step(params: &ParamStore, grad: &[f64], step: f64) -> Result<ParamStore> {
    let out = params.axpy(-step, grad)?;
    if !out.is_finite() {
        return Err(MorfError::numeric(
            "non-finite parameters after virtual step",
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub meta_loss: f64,
    pub grad_phi: Vec<f64>,
}

/// Inputs of one meta-gradient evaluation.
pub struct MetaProblem<'a> {
    pub backbone: &'a Backbone,
    /// Parameters before the virtual step.
    pub params: &'a ParamStore,
    pub train_trees: &'a [SoftTree],
    pub train_inputs: &'a [&'a [f64]],
    pub train_forward: &'a BatchForward,
    pub train_loss: &'a WeightedLoss,
    pub weight_net: &'a WeightNet,
    /// Parameters after the virtual step.
    pub virtual_params: &'a ParamStore,
    pub meta_trees: &'a [SoftTree],
    pub meta_inputs: &'a [&'a [f64]],
    pub meta_targets: &'a [&'a [f64]],
    pub step: f64,
}

/// Unweighted meta loss at the virtual parameters and its exact gradient
/// with respect to the weight-net parameters.
///
/// With `theta' = theta - a/(NT) sum c_t^i(phi) g_t^i`, where `g_t^i` is the
/// training-loss gradient of tree `t` on sample `i`,
/// `dL/dphi = -a/(NT) sum (dc_t^i/dphi) <g_t^i, dL/dtheta'>`.
/// The inner products are directional derivatives of the training losses
/// along `dL/dtheta'`, computed in forward mode.
pub fn meta_gradient(problem: &MetaProblem<'_>) -> Result<MetaGradient> {
    let p = problem;
    let coeff_grads = p.train_loss.coefficient_grads.as_ref().ok_or_else(|| {
        MorfError::InvalidState("meta gradient needs network-weighted losses".into())
    })?;
    let meta_forward = forward_batch(
        p.backbone,
        p.virtual_params,
        p.meta_trees,
        p.meta_inputs,
        p.meta_targets,
    )?;
    let m = meta_forward.samples.len();
    let trees = meta_forward.tree_count();
    let meta_loss = meta_forward.mean_loss();
    let inv = 1.0 / (m * trees) as f64;
    let meta_scale = vec![vec![inv; trees]; m];
    let direction = backbone_gradient(
        p.backbone,
        p.virtual_params,
        p.meta_trees,
        &meta_forward,
        &meta_scale,
    )?;

    let n = p.train_forward.samples.len();
    let t_count = p.train_forward.tree_count();
    let factor = -p.step / (n * t_count) as f64;
    let mut grad_phi = vec![0.0; p.weight_net.params.len()];
    for ((x, sample), grads) in p
        .train_inputs
        .iter()
        .zip(&p.train_forward.samples)
        .zip(coeff_grads)
    {
        let (_, df) = p.backbone.jvp(p.params, x, &direction)?;
        for (t, ((tree, tf), dc)) in p
            .train_trees
            .iter()
            .zip(&sample.trees)
            .zip(grads)
            .enumerate()
        {
            let dg = tree_output_tangent(&df, &tree.topology, &tree.leaves, &tf.route)?;
            let along: f64 = dg.iter().zip(&tf.loss_grad).map(|(a, b)| a * b).sum();
            let range = p.weight_net.range(t);
            for (g, d) in grad_phi[range].iter_mut().zip(dc) {
                *g += factor * along * d;
            }
        }
    }
    if grad_phi.iter().any(|g| !g.is_finite()) {
        return Err(MorfError::numeric("non-finite meta gradient"));
    }
    Ok(MetaGradient {
        meta_loss,
        grad_phi,
    })
}

/// Switches for ablations of the MORF loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MorfOptions {
    pub force_unit_weights: bool,
    pub meta_enabled: bool,
}

impl Default for MorfOptions {
    fn default() -> Self {
        Self {
            force_unit_weights: false,
            meta_enabled: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ForestModel,
    pub weight_net: WeightNet,
    pub theta_optimizer: Optimizer,
    pub phi_optimizer: Optimizer,
    pub epoch: usize,
    pub iteration: u64,
    data_rng: ChaCha8Rng,
    gfs_rng: ChaCha8Rng,
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iteration: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub meta_loss: Option<f64>,
    pub tree_variance: f64,
    pub tree_weights: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub header: Vec<String>,
    pub records: Vec<IterationRecord>,
}

impl TrainLog {
    /// Tab-separated records preceded by `#` comment lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for line in &self.header {
            let _ = writeln!(out, "# {line}");
        }
        let trees = self.records.first().map_or(0, |r| r.tree_weights.len());
        let mut cols = vec![
            "epoch".to_string(),
            "iteration".into(),
            "lr".into(),
            "train_loss".into(),
            "meta_loss".into(),
            "tree_variance".into(),
        ];
        cols.extend((0..trees).map(|t| format!("weight_{t}")));
        let _ = writeln!(out, "{}", cols.join("\t"));
        for r in &self.records {
            let meta = r
                .meta_loss
                .map_or_else(|| "-".to_string(), |m| format!("{m:.9e}"));
            let _ = write!(
                out,
                "{}\t{}\t{:e}\t{:.9e}\t{}\t{:.9e}",
                r.epoch, r.iteration, r.lr, r.train_loss, meta, r.tree_variance
            );
            for w in &r.tree_weights {
                let _ = write!(out, "\t{w:.9e}");
            }
            out.push('\n');
        }
        out
    }
}

pub struct Trainer {
    pub method: Method,
    pub options: MorfOptions,
    pub config: TrainConfig,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(
        method: Method,
        model: &ModelConfig,
        config: &TrainConfig,
        input_dim: usize,
        classes: usize,
    ) -> Result<Self> {
        config.validate()?;
        let backbone = BackboneConfig {
            input_dim,
            hidden_dims: model.hidden_dims.clone(),
            feature_dim: model.feature_dim,
            activation: model.activation,
            init_seed: derive_seed(config.seed, 1),
        };
        let forest = ForestConfig {
            trees: model.trees,
            depth: model.depth,
            classes,
            seed: derive_seed(config.seed, 2),
        };
        let model_state = ForestModel::new(backbone, &forest)?;
        let weight_net = WeightNet::new(
            model.trees,
            &WeightNetConfig {
                hidden: model.weight_hidden,
                seed: derive_seed(config.seed, 3),
            },
        )?;
        let theta_optimizer = Optimizer::new(
            config.optimizer,
            model_state.params.len(),
            config.weight_decay,
        );
        let phi_optimizer = Optimizer::new(config.meta_optimizer, weight_net.params.len(), 0.0);
        Ok(Self {
            method,
            options: MorfOptions::default(),
            config: config.clone(),
            state: TrainState {
                model: model_state,
                weight_net,
                theta_optimizer,
                phi_optimizer,
                epoch: 0,
                iteration: 0,
                data_rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 4)),
                gfs_rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 5)),
            },
        })
    }

    pub fn with_options(mut self, options: MorfOptions) -> Self {
        self.options = options;
        self
    }

    fn uses_weight_net(&self) -> bool {
        self.method == Method::Morf && !self.options.force_unit_weights
    }

    fn uses_meta(&self) -> bool {
        self.method == Method::Morf && self.options.meta_enabled
    }

    fn check_data(&self, data: &TrainData) -> Result<()> {
        if data.is_empty() {
            return Err(MorfError::InvalidInput("training set is empty".into()));
        }
        if data.input_dim() != self.state.model.backbone.input_dim() {
            return Err(MorfError::InputShape {
                expected: self.state.model.backbone.input_dim(),
                got: data.input_dim(),
            });
        }
        if data.classes != self.state.model.classes {
            return Err(MorfError::Config(format!(
                "data has {} classes, model has {}",
                data.classes, self.state.model.classes
            )));
        }
        Ok(())
    }

    /// One MORF (or DORF) iteration.
    pub fn step(
        &mut self,
        data: &TrainData,
        batch: &[usize],
        meta_batch: &[usize],
        lr: f64,
    ) -> Result<IterationRecord> {
        let epoch = self.state.epoch;
        let iteration = self.state.iteration;
        let context = |e: MorfError| match e {
            MorfError::Numeric(msg) => {
                MorfError::Numeric(format!("epoch {epoch}, iteration {iteration}: {msg}"))
            }
            other => other,
        };
        self.step_inner(data, batch, meta_batch, lr)
            .map_err(context)
    }

    fn step_inner(
        &mut self,
        data: &TrainData,
        batch: &[usize],
        meta_batch: &[usize],
        lr: f64,
    ) -> Result<IterationRecord> {
        let inputs: Vec<&[f64]> = batch.iter().map(|&i| data.inputs[i].as_slice()).collect();
        let targets: Vec<&[f64]> = batch.iter().map(|&i| data.targets[i].as_slice()).collect();
        let use_net = self.uses_weight_net();
        let use_meta = self.uses_meta() && use_net;
        let truncated = self.config.truncate_weight_path;

        let state = &mut self.state;
        let model = &state.model;
        let forward = forward_batch(
            &model.backbone,
            &model.params,
            &model.trees,
            &inputs,
            &targets,
        )?;
        let losses = forward.losses();
        let weighting = if use_net {
            Weighting::Net {
                net: &state.weight_net,
                truncated,
            }
        } else {
            Weighting::Unit
        };
        let weighted = weighted_train_loss(&losses, weighting)?;
        let tree_variance = forward.mean_tree_variance();
        let tree_weights = weighted.mean_weight_per_tree();

        let mut meta_loss = None;
        if use_meta {
            let step = self.config.virtual_lr.unwrap_or(lr);
            let grad = backbone_gradient(
                &model.backbone,
                &model.params,
                &model.trees,
                &forward,
                &weighted.gradient_scale(),
            )?;
            let virtual_params = virtual_step(&model.params, &grad, step)?;

            let meta_inputs: Vec<&[f64]> = meta_batch
                .iter()
                .map(|&i| data.inputs[i].as_slice())
                .collect();
            let meta_targets: Vec<&[f64]> = meta_batch
                .iter()
                .map(|&i| data.targets[i].as_slice())
                .collect();
            let stats_features: Vec<Vec<f64>> = if meta_batch == batch {
                forward.samples.iter().map(|s| s.features.clone()).collect()
            } else {
                meta_inputs
                    .iter()
                    .map(|x| model.features(x))
                    .collect::<Result<_>>()?
            };
            let stats = mean_abs_activation(&stats_features)?;
            let depth = model.trees[0].topology.depth();
            let partition = partition_features(&stats, (1 << depth) - 1)?;
            let topologies = sample_assignment(&partition, model.trees.len(), &mut state.gfs_rng)?;
            let meta_trees: Vec<SoftTree> = topologies
                .into_iter()
                .zip(&model.trees)
                .map(|(topology, tree)| SoftTree {
                    topology,
                    leaves: tree.leaves.clone(),
                })
                .collect();

            let meta = meta_gradient(&MetaProblem {
                backbone: &model.backbone,
                params: &model.params,
                train_trees: &model.trees,
                train_inputs: &inputs,
                train_forward: &forward,
                train_loss: &weighted,
                weight_net: &state.weight_net,
                virtual_params: &virtual_params,
                meta_trees: &meta_trees,
                meta_inputs: &meta_inputs,
                meta_targets: &meta_targets,
                step,
            })?;
            state.phi_optimizer.step(
                &mut state.weight_net.params,
                &meta.grad_phi,
                self.config.meta_lr,
            )?;
            meta_loss = Some(meta.meta_loss);
        }

        // actual step with the (possibly refreshed) weights
        let scale = if use_meta {
            weighted_train_loss(
                &losses,
                Weighting::Net {
                    net: &state.weight_net,
                    truncated,
                },
            )?
            .gradient_scale()
        } else {
            weighted.gradient_scale()
        };
        let model = &mut state.model;
        let grad = backbone_gradient(
            &model.backbone,
            &model.params,
            &model.trees,
            &forward,
            &scale,
        )?;
        state.theta_optimizer.step(&mut model.params, &grad, lr)?;
        if !state.weight_net.params.is_finite() {
            return Err(MorfError::numeric("non-finite weight-net parameters"));
        }

        let record = IterationRecord {
            epoch: state.epoch,
            iteration: state.iteration,
            lr,
            train_loss: weighted.value,
            meta_loss,
            tree_variance,
            tree_weights,
        };
        state.iteration += 1;
        Ok(record)
    }

    /// Refreshes the leaf distributions on (a sample of) the training set.
    pub fn update_leaves(&mut self, data: &TrainData) -> Result<()> {
        self.check_data(data)?;
        let mut indices: Vec<usize> = (0..data.len()).collect();
        if let Some(n) = self.config.leaf_update_samples {
            if n < data.len() {
                indices.shuffle(&mut self.state.data_rng);
                indices.truncate(n);
                indices.sort_unstable();
            }
        }
        let inputs: Vec<&[f64]> = indices.iter().map(|&i| data.inputs[i].as_slice()).collect();
        let targets: Vec<OrdinalEncoding> =
            indices.iter().map(|&i| data.encodings[i].clone()).collect();
        self.state
            .model
            .update_leaves(&inputs, &targets, self.config.leaf_update_sweeps)?;
        Ok(())
    }

    /// Runs one epoch of mini-batch steps followed by a leaf refresh.
    pub fn run_epoch(
        &mut self,
        data: &TrainData,
        observer: &mut dyn FnMut(&IterationRecord, &TrainState),
    ) -> Result<Vec<IterationRecord>> {
        self.check_data(data)?;
        let lr = self.config.lr_at(self.state.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.state.data_rng);
        let batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
        let mut records = Vec::with_capacity(batches.len());
        for (b, batch) in batches.iter().enumerate() {
            let meta_batch = match self.config.meta_batch {
                MetaBatchSource::Same => *batch,
                MetaBatchSource::Next => batches[(b + 1) % batches.len()],
            };
            let record = self.step(data, batch, meta_batch, lr)?;
            observer(&record, &self.state);
            records.push(record);
        }
        self.update_leaves(data)?;
        self.state.epoch += 1;
        Ok(records)
    }

    pub fn header(&self) -> Vec<String> {
        let mut lines = vec![format!("method = {}", self.method)];
        if let Ok(text) = toml::to_string(&self.config) {
            lines.extend(text.lines().map(str::to_string));
        }
        lines
    }

    /// Leaf refresh, then `epochs` epochs.
    pub fn fit(mut self, data: &TrainData) -> Result<(TrainState, TrainLog)> {
        self.check_data(data)?;
        let mut log = TrainLog {
            header: self.header(),
            records: Vec::new(),
        };
        if self.config.epochs > 0 {
            self.update_leaves(data)?;
        }
        for _ in 0..self.config.epochs {
            let records = self.run_epoch(data, &mut |_, _| {})?;
            log.records.extend(records);
        }
        Ok((self.state, log))
    }
}

pub fn fit_morf(
    train: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<(TrainState, TrainLog)> {
    let data = TrainData::from_dataset(train)?;
    Trainer::new(Method::Morf, model, config, data.input_dim(), data.classes)?.fit(&data)
}

pub fn fit_dorf(
    train: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<(TrainState, TrainLog)> {
    let data = TrainData::from_dataset(train)?;
    Trainer::new(Method::Dorf, model, config, data.input_dim(), data.classes)?.fit(&data)
}
