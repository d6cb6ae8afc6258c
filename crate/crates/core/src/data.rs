//! Datasets: CSV ingestion, synthetic ordinal tasks, score thresholds,
//! stratified folds, and per-column standardization.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MorfError, Result};
use crate::ordinal::{encode_label, OrdinalEncoding, OrdinalLabel};

/// Benign / unsure / malignant counts used as the default synthetic class ratio.
pub const NODULE_CLASS_COUNTS: [f64; 3] = [1108.0, 1007.0, 510.0];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<OrdinalLabel>,
    pub scores: Option<Vec<f64>>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<OrdinalLabel>, classes: usize) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            scores: None,
            classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.labels.len() {
            return Err(MorfError::InputShape {
                expected: self.features.len(),
                got: self.labels.len(),
            });
        }
        let dim = self.input_dim();
        for row in &self.features {
            if row.len() != dim {
                return Err(MorfError::InputShape {
                    expected: dim,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(MorfError::InvalidInput(
                    "dataset contains non-finite features".into(),
                ));
            }
        }
        if let Some(l) = self.labels.iter().find(|l| l.classes() != self.classes) {
            return Err(MorfError::InvalidInput(format!(
                "label {l} belongs to a {}-class space, dataset has {}",
                l.classes(),
                self.classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn encodings(&self) -> Vec<OrdinalEncoding> {
        self.labels.iter().map(|&l| encode_label(l)).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for l in &self.labels {
            h[l.index()] += 1;
        }
        h
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            scores: self
                .scores
                .as_ref()
                .map(|s| indices.iter().map(|&i| s[i]).collect()),
            classes: self.classes,
        }
    }
}

/// Maps an averaged 1..5 rating onto benign (< 2.5), unsure (2.5..=3.5) or
/// malignant (> 3.5).
pub fn score_to_class(score: f64) -> Result<OrdinalLabel> {
    if !(1.0..=5.0).contains(&score) {
        return Err(MorfError::InvalidInput(format!(
            "score {score} outside [1, 5]"
        )));
    }
    let rank = if score < 2.5 {
        1
    } else if score <= 3.5 {
        2
    } else {
        3
    };
    OrdinalLabel::new(rank, 3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub input_dim: usize,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
    /// Relative class sizes; defaults to the nodule counts for three classes
    /// and to equal sizes otherwise.
    pub class_weights: Option<Vec<f64>>,
}

impl SynthConfig {
    pub fn new(n_samples: usize, input_dim: usize, noise: f64, seed: u64) -> Self {
        Self {
            n_samples,
            input_dim,
            classes: 3,
            noise,
            seed,
            class_weights: None,
        }
    }

    fn weights(&self) -> Vec<f64> {
        match &self.class_weights {
            Some(w) => w.clone(),
            None if self.classes == 3 => NODULE_CLASS_COUNTS.to_vec(),
            None => vec![1.0; self.classes],
        }
    }

    /// Number of samples per class, from rounded cumulative proportions.
    pub fn class_sizes(&self) -> Result<Vec<usize>> {
        let weights = self.weights();
        if weights.len() != self.classes || weights.iter().any(|w| !(*w > 0.0)) {
            return Err(MorfError::Config(
                "class weights must be positive, one per class".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        let mut cum = 0.0;
        let mut prev = 0usize;
        let mut sizes = Vec::with_capacity(self.classes);
        for (k, w) in weights.iter().enumerate() {
            cum += w;
            let bound = if k + 1 == self.classes {
                self.n_samples
            } else {
                (self.n_samples as f64 * cum / total).round() as usize
            };
            sizes.push(bound.saturating_sub(prev));
            prev = bound.max(prev);
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(MorfError::Config("need at least two classes".into()));
        }
        if self.input_dim == 0 {
            return Err(MorfError::Config(
                "input dimension must be at least 1".into(),
            ));
        }
        if self.n_samples < self.classes {
            return Err(MorfError::Config(format!(
                "{} samples cannot cover {} classes",
                self.n_samples, self.classes
            )));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(MorfError::Config(
                "noise must be finite and non-negative".into(),
            ));
        }
        if self.class_sizes()?.contains(&0) {
            return Err(MorfError::Config(format!(
                "{} samples leave some class empty",
                self.n_samples
            )));
        }
        Ok(())
    }
}

/// Random unit direction and Gaussian inputs; ranks come from quantile
/// cuts of the noisy projection onto that direction.
pub fn synthesize(config: &SynthConfig) -> Result<Dataset> {
    Ok(synthesize_with_direction(config)?.0)
}

pub fn synthesize_with_direction(config: &SynthConfig) -> Result<(Dataset, Vec<f64>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut direction: Vec<f64> = (0..config.input_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    direction.iter_mut().for_each(|v| *v /= norm);

    let mut features = Vec::with_capacity(config.n_samples);
    let mut latent = Vec::with_capacity(config.n_samples);
    for _ in 0..config.n_samples {
        let x: Vec<f64> = (0..config.input_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let eps: f64 = StandardNormal.sample(&mut rng);
        let z = x.iter().zip(&direction).map(|(a, b)| a * b).sum::<f64>() + config.noise * eps;
        features.push(x);
        latent.push(z);
    }
    let mut order: Vec<usize> = (0..config.n_samples).collect();
    order.sort_by(|&a, &b| latent[a].total_cmp(&latent[b]).then(a.cmp(&b)));
    let mut labels = vec![OrdinalLabel::new(1, config.classes)?; config.n_samples];
    let mut start = 0;
    for (k, size) in config.class_sizes()?.into_iter().enumerate() {
        for &i in &order[start..start + size] {
            labels[i] = OrdinalLabel::new(k + 1, config.classes)?;
        }
        start += size;
    }
    Ok((Dataset::new(features, labels, config.classes)?, direction))
}

/// Header layout: `f0..f{p-1}` followed by `label` (integer rank) or
/// `score` (averaged rating, thresholded into three classes).
pub fn load_csv(path: &Path, classes: usize) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, classes)
}

pub fn read_csv<R: Read>(reader: R, classes: usize) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| MorfError::Schema(format!("unreadable header: {e}")))?
        .clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    let (last, feature_names) = names
        .split_last()
        .ok_or_else(|| MorfError::Schema("empty header".into()))?;
    let scored = match *last {
        "label" => false,
        "score" => true,
        other => {
            return Err(MorfError::Schema(format!(
                "last column must be `label` or `score`, found {other:?}"
            )))
        }
    };
    for (i, name) in feature_names.iter().enumerate() {
        if *name != format!("f{i}") {
            return Err(MorfError::Schema(format!(
                "feature column {i} must be named `f{i}`, found {name:?}"
            )));
        }
    }
    if feature_names.is_empty() {
        return Err(MorfError::Schema("no feature columns".into()));
    }
    if scored && classes != 3 {
        return Err(MorfError::Schema(
            "score columns map onto exactly three classes".into(),
        ));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| MorfError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != names.len() {
            return Err(MorfError::Parse {
                line,
                message: format!("expected {} fields, found {}", names.len(), record.len()),
            });
        }
        let mut row = Vec::with_capacity(feature_names.len());
        for (col, field) in record.iter().take(feature_names.len()).enumerate() {
            let field = field.trim();
            let v: f64 = field.parse().map_err(|_| MorfError::Parse {
                line,
                message: format!("column f{col}: cannot parse {field:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(MorfError::Parse {
                    line,
                    message: format!("column f{col}: non-finite value"),
                });
            }
            row.push(v);
        }
        let target = record[names.len() - 1].trim();
        if target.is_empty() {
            return Err(MorfError::Parse {
                line,
                message: "missing target value".into(),
            });
        }
        let label = if scored {
            let s: f64 = target.parse().map_err(|_| MorfError::Parse {
                line,
                message: format!("cannot parse score {target:?}"),
            })?;
            scores.push(s);
            score_to_class(s).map_err(|e| MorfError::Parse {
                line,
                message: e.to_string(),
            })?
        } else {
            let r: usize = target.parse().map_err(|_| MorfError::Parse {
                line,
                message: format!("cannot parse label {target:?} as a rank"),
            })?;
            OrdinalLabel::new(r, classes).map_err(|e| MorfError::Parse {
                line,
                message: e.to_string(),
            })?
        };
        features.push(row);
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(MorfError::Schema("no data rows".into()));
    }
    let mut ds = Dataset::new(features, labels, classes)?;
    if scored {
        ds.scores = Some(scores);
    }
    Ok(ds)
}

/// Reads only the `f0..f{p-1}` columns; a trailing `label` or `score`
/// column is allowed and ignored.
pub fn read_features_csv<R: Read>(reader: R) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| MorfError::Schema(format!("unreadable header: {e}")))?
        .clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    let dim = match names.last() {
        Some(&"label") | Some(&"score") => names.len() - 1,
        _ => names.len(),
    };
    if dim == 0 {
        return Err(MorfError::Schema("no feature columns".into()));
    }
    for (i, name) in names.iter().take(dim).enumerate() {
        if *name != format!("f{i}") {
            return Err(MorfError::Schema(format!(
                "feature column {i} must be named `f{i}`, found {name:?}"
            )));
        }
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| MorfError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != names.len() {
            return Err(MorfError::Parse {
                line,
                message: format!("expected {} fields, found {}", names.len(), record.len()),
            });
        }
        let row = record
            .iter()
            .take(dim)
            .enumerate()
            .map(|(col, field)| {
                let field = field.trim();
                field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| MorfError::Parse {
                        line,
                        message: format!("column f{col}: cannot parse {field:?} as a number"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(MorfError::Schema("no data rows".into()));
    }
    Ok(rows)
}

/// Writes a dataset in the layout read by [`read_csv`]. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_csv<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let dim = dataset.input_dim();
    let mut header: Vec<String> = (0..dim).map(|i| format!("f{i}")).collect();
    header.push(
        if dataset.scores.is_some() {
            "score"
        } else {
            "label"
        }
        .into(),
    );
    writeln!(out, "{}", header.join(","))?;
    for (i, row) in dataset.features.iter().enumerate() {
        let mut fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        fields.push(match &dataset.scores {
            Some(s) => format!("{:?}", s[i]),
            None => dataset.labels[i].rank().to_string(),
        });
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_csv(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct KFold {
    pub folds: Vec<Fold>,
    pub warnings: Vec<String>,
}

/// Stratified k-fold split. Classes with fewer than `k` members are pooled
/// and dealt without stratification.
pub fn kfold_split(dataset: &Dataset, k: usize, seed: u64) -> Result<KFold> {
    if k < 2 {
        return Err(MorfError::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if dataset.len() < k {
        return Err(MorfError::Config(format!(
            "{} samples cannot fill {k} folds",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = vec![Vec::new(); dataset.classes];
    for (i, l) in dataset.labels.iter().enumerate() {
        by_class[l.index()].push(i);
    }
    let mut warnings = Vec::new();
    let mut pool = Vec::new();
    let mut test_sets = vec![Vec::new(); k];
    let mut next = 0;
    for (c, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            warnings.push(format!(
                "class r{} has {} members, fewer than {k} folds; not stratified",
                c + 1,
                members.len()
            ));
            pool.extend(members);
            continue;
        }
        members.shuffle(&mut rng);
        for i in members {
            test_sets[next % k].push(i);
            next += 1;
        }
    }
    pool.shuffle(&mut rng);
    for i in pool {
        test_sets[next % k].push(i);
        next += 1;
    }
    let folds = test_sets
        .iter()
        .enumerate()
        .map(|(f, test)| {
            let mut test = test.clone();
            test.sort_unstable();
            let mut train: Vec<usize> = test_sets
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, t)| t.iter().copied())
                .collect();
            train.sort_unstable();
            Fold { train, test }
        })
        .collect();
    Ok(KFold { folds, warnings })
}

/// Per-column z-scoring fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(MorfError::InvalidInput(
                "cannot standardize an empty dataset".into(),
            ));
        }
        let n = dataset.len() as f64;
        let dim = dataset.input_dim();
        let mut mean = vec![0.0; dim];
        for row in &dataset.features {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in &dataset.features {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        // constant columns are centred but not scaled
        let std = var
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn transform(&self, dataset: &Dataset) -> Result<Dataset> {
        if dataset.input_dim() != self.dim() {
            return Err(MorfError::InputShape {
                expected: self.dim(),
                got: dataset.input_dim(),
            });
        }
        let mut out = dataset.clone();
        out.features = dataset
            .features
            .iter()
            .map(|r| self.transform_row(r))
            .collect();
        Ok(out)
    }
}
