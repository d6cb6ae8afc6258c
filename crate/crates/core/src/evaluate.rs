//! Inference over datasets: predictions, metrics and tree spread.

use crate::data::Dataset;
use crate::error::{MorfError, Result};
use crate::forest::ForestModel;
use crate::metrics::{classification_report, tree_variance, ClassificationReport, RankMode};
use crate::ordinal::{decode_distribution, expected_rank, OrdinalLabel};

#[derive(Debug, Clone, PartialEq)]
pub struct RowPrediction {
    pub class: OrdinalLabel,
    pub expected_rank: f64,
    pub tree_ranks: Vec<f64>,
    pub tree_classes: Vec<OrdinalLabel>,
}

impl RowPrediction {
    pub fn spread(&self, mode: RankMode) -> f64 {
        match mode {
            RankMode::Expected => tree_variance(&self.tree_ranks),
            RankMode::Decoded => {
                let ranks: Vec<f64> = self.tree_classes.iter().map(|c| c.rank() as f64).collect();
                tree_variance(&ranks)
            }
        }
    }
}

pub fn predict_row(model: &ForestModel, x: &[f64]) -> Result<RowPrediction> {
    let p = model.predict(x)?;
    Ok(RowPrediction {
        class: decode_distribution(&p.forest),
        expected_rank: expected_rank(&p.forest),
        tree_ranks: p.trees.iter().map(expected_rank).collect(),
        tree_classes: p.trees.iter().map(decode_distribution).collect(),
    })
}

pub fn predict_rows(model: &ForestModel, rows: &[Vec<f64>]) -> Result<Vec<RowPrediction>> {
    rows.iter().map(|x| predict_row(model, x)).collect()
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: ClassificationReport,
    pub mean_tree_variance: f64,
    pub predictions: Vec<RowPrediction>,
}

pub fn evaluate(model: &ForestModel, dataset: &Dataset, mode: RankMode) -> Result<Evaluation> {
    if dataset.input_dim() != model.backbone.input_dim() {
        return Err(MorfError::Schema(format!(
            "model expects {} input features, dataset has {}",
            model.backbone.input_dim(),
            dataset.input_dim()
        )));
    }
    let predictions = predict_rows(model, &dataset.features)?;
    let preds: Vec<OrdinalLabel> = predictions.iter().map(|p| p.class).collect();
    let report = classification_report(&preds, &dataset.labels, dataset.classes)?;
    let mean_tree_variance =
        predictions.iter().map(|p| p.spread(mode)).sum::<f64>() / predictions.len() as f64;
    Ok(Evaluation {
        report,
        mean_tree_variance,
        predictions,
    })
}
