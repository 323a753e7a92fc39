//! Run configuration: defaults, per-dataset presets, JSON file, flags.
//!
//! Resolution order, later wins: built-in defaults, the preset of the
//! selected dataset, the `--config` file, command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{read_json, FeatureSpec, DEFAULT_SENSORS, SETTINGS};
use crate::model::{ModelConfig, Objective};
use crate::nn::PositionOrigin;
use crate::prior::PriorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetId {
    FD001,
    FD002,
    FD003,
    FD004,
}

impl DatasetId {
    pub fn name(self) -> &'static str {
        match self {
            DatasetId::FD001 => "FD001",
            DatasetId::FD002 => "FD002",
            DatasetId::FD003 => "FD003",
            DatasetId::FD004 => "FD004",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "FD001" => Ok(DatasetId::FD001),
            "FD002" => Ok(DatasetId::FD002),
            "FD003" => Ok(DatasetId::FD003),
            "FD004" => Ok(DatasetId::FD004),
            _ => Err(format!("unknown dataset {s:?}; expected FD001..FD004")),
        }
    }
}

/// Published training settings for one C-MAPSS subset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub epochs: usize,
    pub batch_size: usize,
    pub window_length: usize,
    pub codebook_size: usize,
    pub lambda: f64,
}

pub fn preset(id: DatasetId) -> Preset {
    match id {
        DatasetId::FD001 | DatasetId::FD003 => Preset {
            epochs: 100,
            batch_size: 100,
            window_length: 20,
            codebook_size: 25,
            lambda: 0.9,
        },
        DatasetId::FD002 => Preset {
            epochs: 125,
            batch_size: 256,
            window_length: 10,
            codebook_size: 45,
            lambda: 0.99,
        },
        DatasetId::FD004 => Preset {
            epochs: 150,
            batch_size: 256,
            window_length: 10,
            codebook_size: 60,
            lambda: 0.99,
        },
    }
}

pub const DEFAULT_K: usize = 30;

/// Any subset of the run settings, as found in a config file or on the
/// command line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartialConfig {
    pub dataset: Option<DatasetId>,
    pub data_dir: Option<PathBuf>,
    pub train_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
    pub rul_file: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub window_length: Option<usize>,
    pub codebook_size: Option<usize>,
    pub latent_seq: Option<usize>,
    pub latent_dim: Option<usize>,
    pub model_dim: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub encoder_heads: Option<usize>,
    pub decoder_layers: Option<usize>,
    pub decoder_heads: Option<usize>,
    pub ff_multiplier: Option<usize>,
    pub beta: Option<f64>,
    pub learning_rate: Option<f64>,
    pub rul_cap: Option<f64>,
    pub position_origin: Option<PositionOrigin>,
    pub objective: Option<Objective>,
    pub sensors: Option<Vec<usize>>,
    pub settings: Option<usize>,
    pub lambda: Option<f64>,
    pub epsilon: Option<f64>,
    pub tolerance: Option<f64>,
    pub max_iter: Option<usize>,
    pub k: Option<usize>,
}

macro_rules! overlay_fields {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f; } )*
    };
}

impl PartialConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path).map_err(|e| match e {
            Error::Json { path, source } => Error::Config(format!("{}: {source}", path.display())),
            other => other,
        })
    }

    /// Fields set in `top` replace those in `self`.
    pub fn overlay(mut self, top: PartialConfig) -> Self {
        overlay_fields!(self, top;
            dataset, data_dir, train_file, test_file, rul_file, out, seed, epochs, batch_size,
            window_length, codebook_size, latent_seq, latent_dim, model_dim, encoder_layers,
            encoder_heads, decoder_layers, decoder_heads, ff_multiplier, beta, learning_rate,
            rul_cap, position_origin, objective, sensors, settings, lambda, epsilon, tolerance,
            max_iter, k);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataFiles {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub rul: Option<PathBuf>,
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<DatasetId>,
    pub files: DataFiles,
    pub out: PathBuf,
    pub feature_spec: FeatureSpec,
    pub model: ModelConfig,
    pub prior: PriorConfig,
    pub k: usize,
}

impl RunConfig {
    pub fn resolve(p: PartialConfig) -> Result<Self> {
        let mut model = ModelConfig::default();
        let mut prior = PriorConfig::default();
        if let Some(id) = p.dataset {
            let pr = preset(id);
            model.epochs = pr.epochs;
            model.batch_size = pr.batch_size;
            model.window_length = pr.window_length;
            model.codebook_size = pr.codebook_size;
            prior.lambda = pr.lambda;
        }
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(model.seed, p.seed);
        set!(model.epochs, p.epochs);
        set!(model.batch_size, p.batch_size);
        set!(model.window_length, p.window_length);
        set!(model.codebook_size, p.codebook_size);
        set!(model.latent_seq, p.latent_seq);
        set!(model.latent_dim, p.latent_dim);
        set!(model.model_dim, p.model_dim);
        set!(model.encoder_layers, p.encoder_layers);
        set!(model.encoder_heads, p.encoder_heads);
        set!(model.decoder_layers, p.decoder_layers);
        set!(model.decoder_heads, p.decoder_heads);
        set!(model.ff_multiplier, p.ff_multiplier);
        set!(model.beta, p.beta);
        set!(model.learning_rate, p.learning_rate);
        set!(model.rul_cap, p.rul_cap);
        set!(model.position_origin, p.position_origin);
        set!(model.objective, p.objective);
        set!(prior.lambda, p.lambda);
        set!(prior.epsilon, p.epsilon);
        set!(prior.tolerance, p.tolerance);
        set!(prior.max_iter, p.max_iter);

        let feature_spec = FeatureSpec::new(
            p.sensors.unwrap_or_else(|| DEFAULT_SENSORS.to_vec()),
            p.settings.unwrap_or(SETTINGS),
        )?;
        model.features = feature_spec.feature_count();
        model.validate()?;

        if !(0.0..=1.0).contains(&prior.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", prior.lambda)));
        }
        if !(prior.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", prior.epsilon)));
        }
        if !(prior.tolerance > 0.0) || prior.max_iter == 0 {
            return Err(Error::Config("tolerance and max_iter must be positive".into()));
        }
        let k = p.k.unwrap_or(DEFAULT_K);
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }

        let data_dir = p.data_dir.unwrap_or_else(|| PathBuf::from("."));
        let derived = |prefix: &str| p.dataset.map(|id| data_dir.join(format!("{prefix}_{id}.txt")));
        let files = DataFiles {
            train: p.train_file.or_else(|| derived("train")),
            test: p.test_file.or_else(|| derived("test")),
            rul: p.rul_file.or_else(|| derived("RUL")),
        };
        Ok(Self {
            dataset: p.dataset,
            files,
            out: p.out.unwrap_or_else(|| PathBuf::from("out")),
            feature_spec,
            model,
            prior,
            k,
        })
    }
}
