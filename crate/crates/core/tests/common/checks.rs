//! Finite-difference checks shared by the gradient tests and the acceptance run.
//! Each returns the relative error of one random instance.

use super::{central_diff, normal_vec, random_leaves, rel_err, rng};
use morf::backbone::{Activation, Backbone, BackboneConfig};
use morf::forest::{split_gradients, tree_output_tangent, tree_predict, SoftTree, TreeTopology};
use morf::meta::{
    backbone_gradient, forward_batch, meta_gradient, virtual_step, weighted_train_loss,
    MetaProblem, Weighting,
};
use morf::ordinal::{encode_label, OrdinalLabel};
use morf::params::ParamStore;
use morf::twwnet::WeightNet;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const UNIT_STEP: f64 = 1e-6;

fn activation(seed: u64) -> Activation {
    if seed.is_multiple_of(2) {
        Activation::Relu
    } else {
        Activation::Tanh
    }
}

fn random_backbone(
    r: &mut ChaCha8Rng,
    input: usize,
    hidden: Vec<usize>,
    feature: usize,
    act: Activation,
) -> (Backbone, ParamStore) {
    let backbone = Backbone::new(BackboneConfig {
        input_dim: input,
        hidden_dims: hidden,
        feature_dim: feature,
        activation: act,
        init_seed: r.random(),
    })
    .unwrap();
    let params = ParamStore::new(normal_vec(r, backbone.param_count(), 0.6));
    (backbone, params)
}

fn random_targets(r: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            encode_label(OrdinalLabel::new(r.random_range(1..=classes), classes).unwrap())
                .as_targets()
        })
        .collect()
}

/// Backbone parameter and input gradients of `sum_j r_j f_j(x)`.
pub fn backbone(seed: u64) -> f64 {
    let mut r = rng(seed);
    let input = r.random_range(2..7);
    let hidden: Vec<usize> = (0..r.random_range(1..3))
        .map(|_| r.random_range(3..8))
        .collect();
    let feature = r.random_range(2..7);
    let (net, params) = random_backbone(&mut r, input, hidden, feature, activation(seed));
    let x = normal_vec(&mut r, input, 1.0);
    let upstream = normal_vec(&mut r, feature, 1.0);
    let dot = |f: &[f64]| f.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>();

    let (_, cache) = net.forward(&params, &x).unwrap();
    let mut grad = vec![0.0; net.param_count()];
    let grad_x = net.backward(&params, &cache, &upstream, &mut grad).unwrap();

    let fd_params = central_diff(params.as_slice(), UNIT_STEP, |p| {
        dot(&net.features(&ParamStore::new(p.to_vec()), &x).unwrap())
    });
    let fd_x = central_diff(&x, UNIT_STEP, |xp| dot(&net.features(&params, xp).unwrap()));
    rel_err(&grad, &fd_params).max(rel_err(&grad_x, &fd_x))
}

/// Split gradients and output tangents of `sum_k u_k g_k(f)` for one tree.
pub fn tree(seed: u64) -> f64 {
    let mut r = rng(seed);
    let depth = r.random_range(1..5);
    let splits = (1 << depth) - 1;
    let dim = splits + r.random_range(0..4);
    let thresholds = r.random_range(1..5);
    let topology = TreeTopology::random(depth, dim, &mut r).unwrap();
    let leaves = random_leaves(&mut r, topology.leaf_count(), thresholds);
    let f = normal_vec(&mut r, dim, 1.5);
    let u = normal_vec(&mut r, thresholds, 1.0);
    let objective = |f: &[f64]| {
        let (g, _) = tree_predict(f, &topology, &leaves).unwrap();
        g.probs().iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
    };

    let (_, cache) = tree_predict(&f, &topology, &leaves).unwrap();
    let mut grad = vec![0.0; dim];
    split_gradients(&u, &topology, &leaves, &cache, &mut grad).unwrap();
    let fd = central_diff(&f, UNIT_STEP, objective);

    let direction = normal_vec(&mut r, dim, 1.0);
    let dg = tree_output_tangent(&direction, &topology, &leaves, &cache).unwrap();
    let along: f64 = dg.iter().zip(&u).map(|(a, b)| a * b).sum();
    let fd_along: f64 = fd.iter().zip(&direction).map(|(a, b)| a * b).sum();
    rel_err(&grad, &fd).max(rel_err(&[along], &[fd_along]))
}

/// Weight, its input derivative, and the product-rule coefficient.
pub fn weight_net(seed: u64) -> f64 {
    let mut r = rng(seed);
    let trees = r.random_range(1..4);
    let hidden = r.random_range(1..12);
    let t = r.random_range(0..trees);
    let mut net =
        WeightNet::from_params(trees, hidden, vec![0.0; trees * (3 * hidden + 1)]).unwrap();
    net.params = ParamStore::new(normal_vec(&mut r, net.params.len(), 0.8));
    let loss = r.random_range(0.05..4.0);
    let range = net.range(t);
    let phi = net.params.as_slice()[range.clone()].to_vec();
    let with_phi = |p: &[f64]| {
        let mut all = net.params.as_slice().to_vec();
        all[range.clone()].copy_from_slice(p);
        WeightNet::from_params(trees, hidden, all).unwrap()
    };

    let (_, cache) = net.weight(t, loss).unwrap();
    let mut grad = vec![0.0; net.params.len()];
    let d_loss = net.weight_gradients(1.0, &cache, &mut grad).unwrap();
    let fd_phi = central_diff(&phi, UNIT_STEP, |p| with_phi(p).weight(t, loss).unwrap().0);
    let fd_loss = central_diff(&[loss], UNIT_STEP, |l| net.weight(t, l[0]).unwrap().0);
    let mut err = rel_err(&grad[range.clone()], &fd_phi).max(rel_err(&[d_loss], &fd_loss));

    let product = central_diff(&[loss], UNIT_STEP, |l| {
        net.weight(t, l[0]).unwrap().0 * l[0]
    });
    for truncated in [false, true] {
        let c = net.coefficient(t, loss, truncated).unwrap();
        let fd_c = central_diff(&phi, UNIT_STEP, |p| {
            with_phi(p).coefficient(t, loss, truncated).unwrap().value
        });
        err = err.max(rel_err(&c.grad, &fd_c));
        if !truncated {
            err = err.max(rel_err(&[c.value], &product));
        }
    }
    err
}

/// Mean tree loss of a small batch, differentiated down to the backbone parameters.
pub fn composite(seed: u64) -> f64 {
    let mut r = rng(seed);
    let input = r.random_range(2..6);
    let feature = r.random_range(4..9);
    let width = r.random_range(3..7);
    let (net, params) = random_backbone(&mut r, input, vec![width], feature, activation(seed));
    let classes = r.random_range(2..5);
    let depth = r.random_range(1..3);
    let trees: Vec<SoftTree> = (0..r.random_range(1..4))
        .map(|_| {
            let topology = TreeTopology::random(depth, feature, &mut r).unwrap();
            let leaves = random_leaves(&mut r, topology.leaf_count(), classes - 1);
            SoftTree { topology, leaves }
        })
        .collect();
    let n = r.random_range(1..4);
    let inputs: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut r, input, 1.0)).collect();
    let targets = random_targets(&mut r, n, classes);
    let xs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let ts: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();

    let forward = forward_batch(&net, &params, &trees, &xs, &ts).unwrap();
    let scale = vec![vec![1.0 / (n * trees.len()) as f64; trees.len()]; n];
    let grad = backbone_gradient(&net, &params, &trees, &forward, &scale).unwrap();
    let fd = central_diff(params.as_slice(), UNIT_STEP, |p| {
        forward_batch(&net, &ParamStore::new(p.to_vec()), &trees, &xs, &ts)
            .unwrap()
            .mean_loss()
    });
    rel_err(&grad, &fd)
}

/// Analytic meta gradient against finite differences of
/// `phi -> L_meta(theta - a * grad_theta L_train(theta; phi))`.
pub fn bilevel(seed: u64, truncated: bool) -> f64 {
    let mut r = rng(seed);
    let input = r.random_range(2..5);
    let feature = r.random_range(3..9);
    let width = r.random_range(2..5);
    let (net, params) = random_backbone(&mut r, input, vec![width], feature, activation(seed));
    let classes = r.random_range(2..5);
    let depth = r.random_range(1..3);
    let tree_count = r.random_range(1..3);
    let hidden = r.random_range(1..5);
    let mut train_trees = Vec::new();
    let mut meta_trees = Vec::new();
    for _ in 0..tree_count {
        let topology = TreeTopology::random(depth, feature, &mut r).unwrap();
        let leaves = random_leaves(&mut r, topology.leaf_count(), classes - 1);
        meta_trees.push(SoftTree {
            topology: TreeTopology::random(depth, feature, &mut r).unwrap(),
            leaves: leaves.clone(),
        });
        train_trees.push(SoftTree { topology, leaves });
    }
    let weights = normal_vec(&mut r, tree_count * (3 * hidden + 1), 1.0);
    let n = r.random_range(1..4);
    let inputs: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut r, input, 1.0)).collect();
    let targets = random_targets(&mut r, n, classes);
    let meta_inputs: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut r, input, 1.0)).collect();
    let meta_targets = random_targets(&mut r, n, classes);
    let xs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let ts: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    let mxs: Vec<&[f64]> = meta_inputs.iter().map(Vec::as_slice).collect();
    let mts: Vec<&[f64]> = meta_targets.iter().map(Vec::as_slice).collect();
    let step = 0.5;

    let forward = forward_batch(&net, &params, &train_trees, &xs, &ts).unwrap();
    let losses = forward.losses();
    let virtual_params = |phi: &[f64]| {
        let wn = WeightNet::from_params(tree_count, hidden, phi.to_vec()).unwrap();
        let weighted = weighted_train_loss(
            &losses,
            Weighting::Net {
                net: &wn,
                truncated,
            },
        )
        .unwrap();
        let grad = backbone_gradient(
            &net,
            &params,
            &train_trees,
            &forward,
            &weighted.gradient_scale(),
        )
        .unwrap();
        (wn, weighted, virtual_step(&params, &grad, step).unwrap())
    };
    let meta_loss = |phi: &[f64]| {
        let (_, _, theta) = virtual_params(phi);
        forward_batch(&net, &theta, &meta_trees, &mxs, &mts)
            .unwrap()
            .mean_loss()
    };

    let (wn, weighted, theta) = virtual_params(&weights);
    let analytic = meta_gradient(&MetaProblem {
        backbone: &net,
        params: &params,
        train_trees: &train_trees,
        train_inputs: &xs,
        train_forward: &forward,
        train_loss: &weighted,
        weight_net: &wn,
        virtual_params: &theta,
        meta_trees: &meta_trees,
        meta_inputs: &mxs,
        meta_targets: &mts,
        step,
    })
    .unwrap();
    let fd = central_diff(&weights, 1e-5, meta_loss);
    rel_err(&analytic.grad_phi, &fd)
}
