use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochLog, Model, ModelConfig};
use crate::error::{validation, Result};
use crate::ingest::{read_json, write_json, FeatureSpec, NormalizationStats};
use crate::nn::Tensor;
use crate::FORMAT_VERSION;

pub const MODEL_FORMAT: &str = "latent-rul/model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Serialized model. The codebook is kept apart from the network weights
/// so tools can read the latent alphabet without knowing the layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub format_version: u32,
    pub config: ModelConfig,
    pub feature_spec: FeatureSpec,
    pub stats: NormalizationStats,
    pub codebook: NamedTensor,
    pub parameters: Vec<NamedTensor>,
    #[serde(default)]
    pub training_log: Vec<EpochLog>,
}

#[derive(Serialize)]
struct FingerprintView<'a> {
    config: &'a ModelConfig,
    feature_spec: &'a FeatureSpec,
    stats: &'a NormalizationStats,
    codebook: &'a NamedTensor,
    parameters: &'a [NamedTensor],
}

impl ModelFile {
    /// SHA-256 over configuration, preprocessing and weights (not the log).
    pub fn fingerprint(&self) -> String {
        let view = FingerprintView {
            config: &self.config,
            feature_spec: &self.feature_spec,
            stats: &self.stats,
            codebook: &self.codebook,
            parameters: &self.parameters,
        };
        let bytes = serde_json::to_vec(&view).expect("model view serializes");
        let mut hex = String::with_capacity(64);
        for b in Sha256::digest(&bytes).iter() {
            let _ = write!(hex, "{b:02x}");
        }
        hex
    }
}

impl Model {
    pub fn to_file(&self) -> ModelFile {
        let cb = self.codebook_id();
        let named = |id| {
            let t: &Tensor = self.params.get(id);
            NamedTensor {
                name: self.params.name(id).to_string(),
                shape: t.shape().to_vec(),
                values: t.values().to_vec(),
            }
        };
        ModelFile {
            format: MODEL_FORMAT.to_string(),
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            feature_spec: self.feature_spec.clone(),
            stats: self.stats.clone(),
            codebook: named(cb),
            parameters: self.params.ids().filter(|&id| id != cb).map(named).collect(),
            training_log: self.training_log.clone(),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.format != MODEL_FORMAT || file.format_version != FORMAT_VERSION {
            return Err(validation(format!(
                "expected {MODEL_FORMAT} version {FORMAT_VERSION}, found {} version {}",
                file.format, file.format_version
            )));
        }
        let mut model = Model::init(file.config, file.feature_spec, file.stats)?;
        let mut by_name: BTreeMap<String, NamedTensor> = BTreeMap::new();
        for t in file.parameters.into_iter().chain(std::iter::once(file.codebook)) {
            let name = t.name.clone();
            if by_name.insert(name.clone(), t).is_some() {
                return Err(validation(format!("parameter {name} appears twice")));
            }
        }
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let stored = by_name
                .remove(&name)
                .ok_or_else(|| validation(format!("model file lacks parameter {name}")))?;
            let slot = model.params.get_mut(id);
            if stored.shape != slot.shape() {
                return Err(validation(format!(
                    "parameter {name} has shape {:?}, configuration implies {:?}",
                    stored.shape,
                    slot.shape()
                )));
            }
            let tensor = Tensor::new(stored.shape, stored.values)
                .map_err(|e| validation(format!("parameter {name}: {e}")))?;
            if !tensor.is_finite() {
                return Err(validation(format!("parameter {name} has non-finite values")));
            }
            *slot = tensor;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(validation(format!("unexpected parameter {extra}")));
        }
        model.training_log = file.training_log;
        Ok(model)
    }

    pub fn fingerprint(&self) -> String {
        self.to_file().fingerprint()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_file(read_json(path)?)
    }
}
