//! Classification report (accuracy, per-class precision / recall / F1) and
//! the spread of per-tree predictions around the forest average.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{MorfError, Result};
use crate::ordinal::OrdinalLabel;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> usize {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_total(&self, truth: usize) -> usize {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn column_total(&self, pred: usize) -> usize {
        (0..self.classes).map(|t| self.get(t, pred)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// Set when the class was never predicted; precision is then reported as 0.
    pub never_predicted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

pub fn classification_report(
    preds: &[OrdinalLabel],
    truths: &[OrdinalLabel],
    classes: usize,
) -> Result<ClassificationReport> {
    if preds.len() != truths.len() {
        return Err(MorfError::InputShape {
            expected: truths.len(),
            got: preds.len(),
        });
    }
    if preds.is_empty() {
        return Err(MorfError::InvalidInput("no predictions to score".into()));
    }
    let mut confusion = ConfusionMatrix::new(classes);
    for (p, t) in preds.iter().zip(truths) {
        if p.classes() != classes || t.classes() != classes {
            return Err(MorfError::InvalidInput(format!(
                "labels must come from a {classes}-class space"
            )));
        }
        confusion.record(t.index(), p.index());
    }
    let per_class = (0..classes)
        .map(|c| {
            let tp = confusion.get(c, c) as f64;
            let predicted = confusion.column_total(c);
            let support = confusion.row_total(c);
            let precision = if predicted > 0 {
                tp / predicted as f64
            } else {
                0.0
            };
            let recall = if support > 0 {
                tp / support as f64
            } else {
                0.0
            };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
                never_predicted: predicted == 0,
            }
        })
        .collect();
    Ok(ClassificationReport {
        accuracy: confusion.trace() as f64 / confusion.total() as f64,
        per_class,
        confusion,
    })
}

impl ClassificationReport {
    /// Flat `key<TAB>value` lines: accuracy then precision/recall/F1 per class.
    pub fn to_table(&self) -> String {
        let classes = self.per_class.len();
        let mut out = String::new();
        let _ = writeln!(out, "accuracy\t{:.6}", self.accuracy);
        for (c, m) in self.per_class.iter().enumerate() {
            let name = OrdinalLabel::new(c + 1, classes)
                .map(|l| l.name())
                .unwrap_or_else(|_| format!("r{}", c + 1));
            let _ = writeln!(out, "{name}.precision\t{:.6}", m.precision);
            let _ = writeln!(out, "{name}.recall\t{:.6}", m.recall);
            let _ = writeln!(out, "{name}.f1\t{:.6}", m.f1);
            let _ = writeln!(out, "{name}.support\t{}", m.support);
            if m.never_predicted {
                let _ = writeln!(out, "{name}.never_predicted\ttrue");
            }
        }
        out
    }
}

/// How a tree's output is turned into the rank used for the spread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankMode {
    #[default]
    Expected,
    Decoded,
}

/// Mean squared deviation of per-tree ranks from their mean.
pub fn tree_variance(tree_ranks: &[f64]) -> f64 {
    if tree_ranks.is_empty() {
        return 0.0;
    }
    let mean = tree_ranks.iter().sum::<f64>() / tree_ranks.len() as f64;
    tree_variance_around(tree_ranks, mean)
}

/// Mean squared deviation of per-tree ranks from a given final rank.
pub fn tree_variance_around(tree_ranks: &[f64], final_rank: f64) -> f64 {
    if tree_ranks.is_empty() {
        return 0.0;
    }
    tree_ranks
        .iter()
        .map(|p| (p - final_rank) * (p - final_rank))
        .sum::<f64>()
        / tree_ranks.len() as f64
}
