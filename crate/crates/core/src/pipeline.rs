//! Library construction and divergence-based prediction over windowed datasets.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{validation, Error, Result};
use crate::ingest::{TimeWindow, WindowedDataset};
use crate::model::Model;
use crate::prior::{priors_for_system, PriorConfig};
use crate::similarity::{nearest, predict_rul, LibraryEntry, PriorLibrary};

/// Checks that a dataset was preprocessed the way the model expects.
pub fn check_dataset(model: &Model, data: &WindowedDataset) -> Result<()> {
    data.validate()?;
    if data.window_length != model.config.window_length {
        return Err(validation(format!(
            "windows have length {}, model expects {}",
            data.window_length, model.config.window_length
        )));
    }
    if data.feature_spec != model.feature_spec {
        return Err(validation("dataset feature selection differs from the model's"));
    }
    if data.stats != model.stats {
        return Err(validation("dataset normalization statistics differ from the model's"));
    }
    Ok(())
}

/// Checks that a library was built by this model.
pub fn check_library(model: &Model, library: &PriorLibrary) -> Result<()> {
    library.validate()?;
    if library.n_states != model.config.codebook_size {
        return Err(validation(format!(
            "library has {} states, model codebook has {} entries",
            library.n_states, model.config.codebook_size
        )));
    }
    if let Some(fp) = &library.model_fingerprint {
        let ours = model.fingerprint();
        if *fp != ours {
            return Err(validation(format!(
                "library was built by model {fp}, not {ours}"
            )));
        }
    }
    Ok(())
}

/// Windows of each unit in window order, units in ascending id order.
fn by_unit(windows: &[TimeWindow]) -> Vec<(u32, Vec<usize>)> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        groups.entry(w.unit_id).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(unit, mut idx)| {
            idx.sort_by_key(|&i| windows[i].window_id);
            (unit, idx)
        })
        .collect()
}

/// One prior per training window, labelled with that window's RUL target.
pub fn build_library(model: &Model, train: &WindowedDataset, prior: PriorConfig) -> Result<PriorLibrary> {
    check_dataset(model, train)?;
    let states = model.latent_states_batch(&train.windows)?;
    let per_unit: Vec<Vec<LibraryEntry>> = by_unit(&train.windows)
        .into_par_iter()
        .map(|(unit, idx)| {
            let seqs: Vec<(u32, Vec<usize>)> = idx
                .iter()
                .map(|&i| (train.windows[i].window_id, states[i].clone()))
                .collect();
            let priors = priors_for_system(&seqs, model.config.codebook_size, prior)?;
            Ok(priors
                .into_iter()
                .zip(&idx)
                .map(|((window_id, ss), &i)| LibraryEntry {
                    system_id: unit,
                    window_id,
                    pi: ss.pi,
                    rul: train.windows[i].rul_target,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut library = PriorLibrary::new(model.config.codebook_size, Some(model.fingerprint()));
    for entry in per_unit.into_iter().flatten() {
        library.push(entry)?;
    }
    Ok(library)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitPrediction {
    pub unit_id: u32,
    /// Prediction from the unit's final window.
    pub predicted_rul: f64,
    /// `(window_id, prediction)` for every window, when requested.
    pub trajectory: Vec<(u32, f64)>,
}

/// Folds each test unit's windows into a prior and averages the RUL of the
/// `k` library entries with the smallest JS divergence to the final prior.
pub fn predict(
    model: &Model,
    library: &PriorLibrary,
    test: &WindowedDataset,
    prior: PriorConfig,
    k: usize,
    intermediate: bool,
) -> Result<Vec<UnitPrediction>> {
    check_dataset(model, test)?;
    check_library(model, library)?;
    if library.is_empty() {
        return Err(Error::Query("library is empty".into()));
    }
    let states = model.latent_states_batch(&test.windows)?;
    by_unit(&test.windows)
        .into_par_iter()
        .map(|(unit, idx)| {
            let seqs: Vec<(u32, Vec<usize>)> = idx
                .iter()
                .map(|&i| (test.windows[i].window_id, states[i].clone()))
                .collect();
            let priors = priors_for_system(&seqs, model.config.codebook_size, prior)?;
            let query = |pi: &[f64]| predict_rul(&nearest(pi, library, k, None)?);
            let (_, last) = priors.last().expect("every unit has a window");
            let predicted_rul = query(&last.pi)?;
            let trajectory = if intermediate {
                priors
                    .iter()
                    .map(|(w, ss)| Ok((*w, query(&ss.pi)?)))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            Ok(UnitPrediction {
                unit_id: unit,
                predicted_rul,
                trajectory,
            })
        })
        .collect()
}

/// Ground-truth RUL of every unit in a test dataset.
pub fn truths(test: &WindowedDataset) -> Result<Vec<(u32, f64)>> {
    test.units
        .iter()
        .map(|u| {
            u.truth_rul
                .map(|r| (u.unit_id, r as f64))
                .ok_or_else(|| validation(format!("unit {} has no ground-truth RUL", u.unit_id)))
        })
        .collect()
}

/// Mean training target: the prediction of a model that ignores its input.
pub fn constant_mean_baseline(train: &WindowedDataset) -> Result<f64> {
    if train.windows.is_empty() {
        return Err(validation("training set has no windows"));
    }
    Ok(train.windows.iter().map(|w| w.rul_target).sum::<f64>() / train.windows.len() as f64)
}

pub fn predictions_csv(predictions: &[UnitPrediction]) -> String {
    let mut out = String::from("unit_id,predicted_rul\n");
    for p in predictions {
        let _ = writeln!(out, "{},{}", p.unit_id, p.predicted_rul);
    }
    out
}

pub fn trajectories_csv(predictions: &[UnitPrediction]) -> String {
    let mut out = String::from("unit_id,window_id,predicted_rul\n");
    for p in predictions {
        for (w, r) in &p.trajectory {
            let _ = writeln!(out, "{},{w},{r}", p.unit_id);
        }
    }
    out
}

/// Parses the output of [`predictions_csv`].
pub fn parse_predictions_csv(text: &str) -> Result<Vec<(u32, f64)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "unit_id,predicted_rul" => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "expected header unit_id,predicted_rul".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let (id, rul) = l.split_once(',').ok_or_else(|| bad("expected two fields"))?;
            let id = id.trim().parse().map_err(|_| bad("bad unit id"))?;
            let rul: f64 = rul.trim().parse().map_err(|_| bad("bad RUL value"))?;
            if !rul.is_finite() {
                return Err(bad("non-finite RUL value"));
            }
            Ok((id, rul))
        })
        .collect()
}
