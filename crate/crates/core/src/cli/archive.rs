//! Versioned, self-describing JSON model archive.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::data::Standardizer;
use crate::error::{MorfError, Result};
use crate::forest::{ForestModel, SoftTree};
use crate::meta::{Method, ModelConfig, TrainConfig};
use crate::params::ParamStore;
use crate::twwnet::WeightNet;

pub const SCHEMA_VERSION: u32 = 1;
pub const FORMAT: &str = "morf-model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    pub config_hash: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Training-only weight-net parameters; inference never reads them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightNetRecord {
    pub hidden: usize,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArchive {
    pub format: String,
    pub schema_version: u32,
    pub classes: usize,
    pub backbone: BackboneConfig,
    pub backbone_params: Vec<f64>,
    pub normalizer: Standardizer,
    pub trees: Vec<SoftTree>,
    pub train: TrainMetadata,
    pub weight_net: Option<WeightNetRecord>,
}

/// 64-bit FNV-1a, used to fingerprint the effective configuration.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let text = format!(
        "{}\n{}",
        toml::to_string(model).unwrap_or_default(),
        toml::to_string(train).unwrap_or_default()
    );
    format!("{:016x}", fnv1a(text.as_bytes()))
}

impl ModelArchive {
    pub fn from_model(
        model: &ForestModel,
        normalizer: &Standardizer,
        weight_net: Option<&WeightNet>,
        train: TrainMetadata,
    ) -> Self {
        Self {
            format: FORMAT.into(),
            schema_version: SCHEMA_VERSION,
            classes: model.classes,
            backbone: model.backbone.config().clone(),
            backbone_params: model.params.as_slice().to_vec(),
            normalizer: normalizer.clone(),
            trees: model.trees.clone(),
            train,
            weight_net: weight_net.map(|w| WeightNetRecord {
                hidden: w.hidden(),
                params: w.params.as_slice().to_vec(),
            }),
        }
    }

    /// Rebuilds the inference model, validating every dimension.
    pub fn to_model(&self) -> Result<ForestModel> {
        self.check_header()?;
        let backbone =
            Backbone::new(self.backbone.clone()).map_err(|e| MorfError::Schema(e.to_string()))?;
        if self.normalizer.dim() != backbone.input_dim() {
            return Err(MorfError::Schema(format!(
                "normalizer width {} does not match backbone input {}",
                self.normalizer.dim(),
                backbone.input_dim()
            )));
        }
        let model = ForestModel {
            backbone,
            params: ParamStore::new(self.backbone_params.clone()),
            trees: self.trees.clone(),
            classes: self.classes,
        };
        model.validate()?;
        Ok(model)
    }

    fn check_header(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(MorfError::Schema(format!(
                "not a model archive (format {:?})",
                self.format
            )));
        }
        if self.schema_version != SCHEMA_VERSION {
            return Err(MorfError::Schema(format!(
                "unsupported archive version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| MorfError::Schema(format!("cannot serialize archive: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let archive: Self = serde_json::from_str(text)
            .map_err(|e| MorfError::Schema(format!("malformed archive: {e}")))?;
        archive.to_model()?;
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
