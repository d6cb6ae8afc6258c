//! One function per acceptance criterion. `Ok` and `Err` both carry the
//! measured numbers.

use super::{checks, normal_vec, random_leaves, rng};
use morf::cli::archive::ModelArchive;
use morf::data::{kfold_split, synthesize, Standardizer, SynthConfig};
use morf::evaluate::{evaluate, predict_row};
use morf::forest::{route, update_leaf_distributions, TreeTopology};
use morf::gfs::{partition_features, sample_assignment};
use morf::meta::{
    fit_dorf, fit_morf, Method, ModelConfig, MorfOptions, TrainConfig, TrainData, Trainer,
};
use morf::metrics::RankMode;
use morf::ordinal::{encode_label, OrdinalLabel};
use rand::Rng;
use std::time::{Duration, Instant};

pub type Outcome = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let outcome = f();
    let elapsed = start.elapsed();
    let note = |d: String| {
        format!(
            "{d}; {:.2}s (limit {}s)",
            elapsed.as_secs_f64(),
            limit.as_secs()
        )
    };
    match outcome {
        Ok(d) if elapsed <= limit => Ok(note(d)),
        Ok(d) | Err(d) => Err(note(d)),
    }
}

pub fn routing_normalization() -> Outcome {
    timed(Duration::from_secs(1), || {
        let mut r = rng(11);
        let mut worst: f64 = 0.0;
        for depth in 1..=4 {
            let dim = 20;
            let topology = TreeTopology::random(depth, dim, &mut r).unwrap();
            for _ in 0..1000 {
                let f = normal_vec(&mut r, dim, 3.0);
                let sum: f64 = route(&f, &topology).unwrap().leaf_probs().iter().sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
        verdict(worst <= 1e-12, format!("max |sum - 1| = {worst:.1e}"))
    })
}

pub fn gradient_suite(instances: u64) -> Outcome {
    timed(Duration::from_secs(30), || {
        let mut unit: f64 = 0.0;
        let mut composite: f64 = 0.0;
        for seed in 0..instances {
            unit = unit
                .max(checks::backbone(seed))
                .max(checks::tree(seed))
                .max(checks::weight_net(seed));
            composite = composite.max(checks::composite(seed));
        }
        verdict(
            unit <= 1e-6 && composite <= 1e-5,
            format!("{instances} instances each; unit max {unit:.1e} (<= 1e-6), composite max {composite:.1e} (<= 1e-5)"),
        )
    })
}

pub fn bilevel_exactness(instances: u64) -> Outcome {
    timed(Duration::from_secs(30), || {
        let mut worst: f64 = 0.0;
        for seed in 0..instances {
            worst = worst
                .max(checks::bilevel(seed, false))
                .max(checks::bilevel(seed, true));
        }
        verdict(
            worst <= 1e-4,
            format!("{instances} instances; max rel err {worst:.1e} (<= 1e-4)"),
        )
    })
}

fn single_leaf_rows(fraction_positive: usize, total: usize, classes: usize) -> Vec<f64> {
    let topology = TreeTopology::new(1, vec![0], 1).unwrap();
    let mut r = rng(5);
    let leaves = random_leaves(&mut r, 2, classes - 1);
    let features = vec![vec![40.0]; total];
    let targets: Vec<_> = (0..total)
        .map(|i| {
            let rank = if i < fraction_positive { 2 } else { 1 };
            encode_label(OrdinalLabel::new(rank, classes).unwrap())
        })
        .collect();
    let update = update_leaf_distributions(&features, &targets, &topology, &leaves, 20).unwrap();
    update.leaves.row(0).to_vec()
}

/// Grid maximiser of `pos ln p + neg ln(1 - p)` over `{0, 0.001, ..., 1}`.
fn grid_mle(pos: f64, neg: f64) -> f64 {
    (0..=1000)
        .map(|i| i as f64 / 1000.0)
        .map(|p| {
            let ll = pos * p.ln() + neg * (1.0 - p).ln();
            (p, if ll.is_nan() { f64::NEG_INFINITY } else { ll })
        })
        .fold((0.0, f64::NEG_INFINITY), |best, cur| {
            if cur.1 > best.1 {
                cur
            } else {
                best
            }
        })
        .0
}

pub fn leaf_update() -> Outcome {
    timed(Duration::from_secs(10), || {
        let mut worst_drop: f64 = 0.0;
        let mut monotone = true;
        for seed in 0..50 {
            let mut r = rng(1000 + seed);
            let depth = r.random_range(1..4);
            let dim = (1 << depth) + 3;
            let classes = r.random_range(2..6);
            let topology = TreeTopology::random(depth, dim, &mut r).unwrap();
            let leaves = random_leaves(&mut r, topology.leaf_count(), classes - 1);
            let n = r.random_range(20..80);
            let features: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut r, dim, 2.0)).collect();
            let targets: Vec<_> = (0..n)
                .map(|_| {
                    encode_label(OrdinalLabel::new(r.random_range(1..=classes), classes).unwrap())
                })
                .collect();
            let update =
                update_leaf_distributions(&features, &targets, &topology, &leaves, 20).unwrap();
            for pair in update.log_likelihood.windows(2) {
                for (before, after) in pair[0].iter().zip(&pair[1]) {
                    worst_drop = worst_drop.max((before - after) / before.abs().max(1.0));
                }
            }
            monotone &= update
                .leaves
                .rows()
                .all(|row| row.windows(2).all(|w| w[0] >= w[1]));
        }
        let single = single_leaf_rows(40, 40, 3);
        let single_err = (single[0] - 1.0).abs().max(single[1].abs());
        let fraction = single_leaf_rows(75, 100, 2)[0];
        let oracle = grid_mle(75.0, 25.0);
        let fraction_err = (fraction - oracle).abs();
        verdict(
            worst_drop <= 1e-12 && monotone && single_err <= 1e-3 && fraction_err <= 1e-3,
            format!(
                "50 instances; worst relative log-likelihood drop {worst_drop:.1e}; rows monotone {monotone}; \
                 single-leaf err {single_err:.1e}; 0.75-fraction leaf {fraction:.6} vs grid {oracle}"
            ),
        )
    })
}

pub fn gfs_properties() -> Outcome {
    timed(Duration::from_secs(5), || {
        let mut r = rng(21);
        let mut problems = Vec::new();
        for (dim, depth) in [(7, 2), (10, 2), (21, 3), (64, 3), (256, 3), (40, 4)] {
            let splits = (1 << depth) - 1;
            let stats: Vec<f64> = (0..dim).map(|_| r.random_range(0.0..1.0)).collect();
            let partition = partition_features(&stats, splits).unwrap();
            let groups = partition.groups();
            let mut seen: Vec<usize> = groups.iter().flatten().copied().collect();
            seen.sort_unstable();
            if seen != (0..dim).collect::<Vec<_>>() {
                problems.push(format!("D={dim}: groups do not cover each feature once"));
            }
            for pair in groups.windows(2) {
                let low = pair[0]
                    .iter()
                    .map(|&i| stats[i])
                    .fold(f64::INFINITY, f64::min);
                let high = pair[1]
                    .iter()
                    .map(|&i| stats[i])
                    .fold(f64::NEG_INFINITY, f64::max);
                if low < high {
                    problems.push(format!("D={dim}: groups interleave in rank"));
                }
            }
            let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
            if sizes.iter().max().unwrap() - sizes.iter().min().unwrap() > 1 {
                problems.push(format!("D={dim}: sizes {sizes:?}"));
            }
            for topology in sample_assignment(&partition, 5, &mut r).unwrap() {
                for (node, &feature) in topology.assignment().iter().enumerate() {
                    if !groups[node].contains(&feature) {
                        problems.push(format!("D={dim}: node {node} drew outside its group"));
                    }
                }
            }
        }

        let stats: Vec<f64> = (0..21).map(|i| (i * 7 % 21) as f64).collect();
        let partition = partition_features(&stats, 7).unwrap();
        let draws = 10_000;
        let mut counts = vec![vec![0usize; 21]; 7];
        for topology in sample_assignment(&partition, draws, &mut r).unwrap() {
            for (node, &feature) in topology.assignment().iter().enumerate() {
                counts[node][feature] += 1;
            }
        }
        let mut worst: f64 = 0.0;
        for (node, group) in partition.groups().iter().enumerate() {
            let expected = 1.0 / group.len() as f64;
            for &feature in group {
                worst = worst.max((counts[node][feature] as f64 / draws as f64 - expected).abs());
            }
        }
        if worst > 0.02 {
            problems.push(format!("uniformity off by {worst:.4}"));
        }
        verdict(
            problems.is_empty(),
            format!(
                "coverage/locality/sizes on 6 shapes; max |freq - 1/3| = {worst:.4} over {draws} draws{}",
                if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
            ),
        )
    })
}

fn small_model() -> ModelConfig {
    ModelConfig {
        hidden_dims: vec![16],
        feature_dim: 32,
        ..ModelConfig::default()
    }
}

/// Theta after every iteration of one 20-batch epoch.
pub fn theta_trajectory(
    method: Method,
    options: MorfOptions,
    config: &TrainConfig,
) -> Vec<Vec<f64>> {
    let ds = synthesize(&SynthConfig::new(320, 8, 0.3, 3)).unwrap();
    let data = TrainData::from_dataset(&ds).unwrap();
    let mut trainer = Trainer::new(method, &small_model(), config, 8, 3)
        .unwrap()
        .with_options(options);
    trainer.update_leaves(&data).unwrap();
    let mut trajectory = Vec::new();
    trainer
        .run_epoch(&data, &mut |_, state| {
            trajectory.push(state.model.params.as_slice().to_vec())
        })
        .unwrap();
    trajectory
}

pub fn equivalence() -> Outcome {
    let config = TrainConfig {
        seed: 9,
        ..TrainConfig::default()
    };
    let dorf = theta_trajectory(Method::Dorf, MorfOptions::default(), &config);
    let morf = theta_trajectory(
        Method::Morf,
        MorfOptions {
            force_unit_weights: true,
            meta_enabled: false,
        },
        &config,
    );
    let identical = dorf
        .iter()
        .zip(&morf)
        .take_while(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        })
        .count();
    verdict(
        dorf.len() == 20 && morf.len() == 20 && identical == 20,
        format!("{identical}/20 iterations bit-identical"),
    )
}

pub fn persistence() -> Outcome {
    let ds = synthesize(&SynthConfig::new(400, 6, 0.4, 8)).unwrap();
    let config = TrainConfig {
        epochs: 2,
        seed: 8,
        ..TrainConfig::default()
    };
    let (state, _) = fit_morf(&ds, &small_model(), &config).unwrap();
    let normalizer = Standardizer::identity(6);
    let archive = ModelArchive::from_model(
        &state.model,
        &normalizer,
        Some(&state.weight_net),
        morf::cli::archive::TrainMetadata {
            method: Method::Morf,
            seed: 8,
            epochs: 2,
            config_hash: morf::cli::archive::config_hash(&small_model(), &config),
            model: small_model(),
            train: config.clone(),
        },
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    archive.save(&path).unwrap();
    let loaded = ModelArchive::load(&path).unwrap().to_model().unwrap();

    let mut r = rng(4);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let x = normal_vec(&mut r, 6, 1.5);
        let a = predict_row(&state.model, &x).unwrap();
        let b = predict_row(&loaded, &x).unwrap();
        let same = a.class == b.class
            && a.expected_rank.to_bits() == b.expected_rank.to_bits()
            && a.tree_ranks
                .iter()
                .zip(&b.tree_ranks)
                .all(|(p, q)| p.to_bits() == q.to_bits());
        if !same {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0,
        format!("{mismatches}/1000 predictions differ after save/load"),
    )
}

/// Runs the binary's entry point in-process; returns (exit code, stdout, stderr).
pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("morf").chain(args.iter().copied());
    let code = morf::cli::run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

pub fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (data, model, log, preds) = (
        p("data.csv"),
        p("model.json"),
        p("train.log"),
        p("preds.csv"),
    );
    let commands: Vec<Vec<&str>> = vec![
        vec![
            "gen-data", "--n", "300", "--dim", "6", "--seed", "5", "--out", &data,
        ],
        vec![
            "train",
            "--data",
            &data,
            "--out",
            &model,
            "--log",
            &log,
            "--epochs",
            "2",
            "--trees",
            "3",
            "--feature-dim",
            "16",
            "--hidden",
            "8",
            "--seed",
            "5",
        ],
        vec!["eval", "--model", &model, "--data", &data],
        vec![
            "predict", "--model", &model, "--data", &data, "--out", &preds,
        ],
    ];
    let files = [&data, &model, &log, &preds];
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for _ in 0..2 {
        let mut outputs = Vec::new();
        for args in &commands {
            let (code, out, err) = run_cli(args);
            if code != 0 {
                failures.push(format!("{} exited {code}: {err}", args[0]));
            }
            outputs.push(out.into_bytes());
        }
        outputs.extend(files.iter().map(|f| std::fs::read(f).unwrap_or_default()));
        runs.push(outputs);
    }
    let labels = [
        "gen-data stdout",
        "train stdout",
        "eval report",
        "predict stdout",
        "data",
        "archive",
        "log",
        "predictions",
    ];
    let differing: Vec<&str> = labels
        .iter()
        .zip(runs[0].iter().zip(&runs[1]))
        .filter(|(_, (a, b))| a != b)
        .map(|(l, _)| *l)
        .collect();
    let empty = runs[0][4..].iter().any(Vec::is_empty);
    verdict(
        failures.is_empty() && differing.is_empty() && !empty,
        if failures.is_empty() && differing.is_empty() && !empty {
            "gen-data, train (archive + log), eval, predict byte-identical across two runs".into()
        } else {
            format!("failures: {failures:?}; differing: {differing:?}; missing output: {empty}")
        },
    )
}

pub struct Comparison {
    pub dorf_accuracy: Vec<f64>,
    pub morf_accuracy: Vec<f64>,
    pub dorf_variance: Vec<f64>,
    pub morf_variance: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// The synthetic fixture: 2625 samples, 32 inputs, nodule class ratio,
/// noise 0.5; one stratified 80/20 split per seed; default model and training settings.
pub fn compare(seeds: u64) -> Comparison {
    let mut cmp = Comparison {
        dorf_accuracy: Vec::new(),
        morf_accuracy: Vec::new(),
        dorf_variance: Vec::new(),
        morf_variance: Vec::new(),
    };
    for seed in 0..seeds {
        let ds = synthesize(&SynthConfig::new(2625, 32, 0.5, seed)).unwrap();
        let fold = &kfold_split(&ds, 5, seed).unwrap().folds[0];
        let train = ds.subset(&fold.train);
        let normalizer = Standardizer::fit(&train).unwrap();
        let train = normalizer.transform(&train).unwrap();
        let test = normalizer.transform(&ds.subset(&fold.test)).unwrap();
        let model = ModelConfig::default();
        let config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let (dorf, _) = fit_dorf(&train, &model, &config).unwrap();
        let (morf, _) = fit_morf(&train, &model, &config).unwrap();
        let d = evaluate(&dorf.model, &test, RankMode::Expected).unwrap();
        let m = evaluate(&morf.model, &test, RankMode::Expected).unwrap();
        cmp.dorf_accuracy.push(d.report.accuracy);
        cmp.morf_accuracy.push(m.report.accuracy);
        cmp.dorf_variance.push(d.mean_tree_variance);
        cmp.morf_variance.push(m.mean_tree_variance);
    }
    cmp
}

pub fn comparative_trend() -> Outcome {
    timed(Duration::from_secs(300), || {
        let c = compare(5);
        let (am, ad) = (mean(&c.morf_accuracy), mean(&c.dorf_accuracy));
        let (vm, vd) = (mean(&c.morf_variance), mean(&c.dorf_variance));
        verdict(
            am >= ad && vm < vd,
            format!(
                "5 seeds; accuracy MORF {am:.4} vs DORF {ad:.4} (need >=); tree variance MORF {vm:.5} vs DORF {vd:.5} (need <)"
            ),
        )
    })
}
