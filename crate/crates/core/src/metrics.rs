//! RMSE and the asymmetric PHM08 score.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{domain, validation, Result};

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(domain(format!(
            "need equal non-empty lengths, got {} predictions and {} truths",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Penalty for one error `h = predicted - true`: `e^(-h/13) - 1` when early,
/// `e^(h/10) - 1` when late.
pub fn score_contribution(h: f64) -> f64 {
    if h < 0.0 {
        (-h / 13.0).exp() - 1.0
    } else {
        (h / 10.0).exp() - 1.0
    }
}

/// Summed (not averaged) PHM08 score.
pub fn phm_score(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| score_contribution(p - t))
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitResult {
    pub unit_id: u32,
    pub predicted: f64,
    pub truth: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Sorted ascending by true RUL, ties by unit id.
    pub units: Vec<UnitResult>,
    pub rmse: f64,
    pub score: f64,
    pub n_test: usize,
}

impl EvaluationReport {
    /// Pairs predictions with truths by unit id. Both sides must cover the
    /// same set of units.
    pub fn from_pairs(predictions: &[(u32, f64)], truths: &[(u32, f64)]) -> Result<Self> {
        let mut pred = predictions.to_vec();
        let mut truth = truths.to_vec();
        pred.sort_by_key(|p| p.0);
        truth.sort_by_key(|t| t.0);
        let pred_ids: Vec<u32> = pred.iter().map(|p| p.0).collect();
        let truth_ids: Vec<u32> = truth.iter().map(|t| t.0).collect();
        if pred_ids != truth_ids {
            return Err(validation(format!(
                "prediction units {pred_ids:?} do not match ground-truth units {truth_ids:?}"
            )));
        }
        let p: Vec<f64> = pred.iter().map(|x| x.1).collect();
        let t: Vec<f64> = truth.iter().map(|x| x.1).collect();
        let mut units: Vec<UnitResult> = pred
            .iter()
            .zip(&truth)
            .map(|(&(unit_id, predicted), &(_, truth))| UnitResult {
                unit_id,
                predicted,
                truth,
                error: predicted - truth,
            })
            .collect();
        units.sort_by(|a, b| a.truth.total_cmp(&b.truth).then(a.unit_id.cmp(&b.unit_id)));
        Ok(Self {
            rmse: rmse(&p, &t)?,
            score: phm_score(&p, &t)?,
            n_test: units.len(),
            units,
        })
    }

    /// `unit_id,predicted_rul,true_rul,h` rows followed by a `# summary` line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("unit_id,predicted_rul,true_rul,h\n");
        for u in &self.units {
            let _ = writeln!(out, "{},{},{},{}", u.unit_id, u.predicted, u.truth, u.error);
        }
        let _ = writeln!(
            out,
            "# summary n_test={} rmse={} score={}",
            self.n_test, self.rmse, self.score
        );
        out
    }

    /// Rank-ordered table for plotting predicted against actual RUL.
    pub fn plot_table_csv(&self) -> String {
        let mut out = String::from("rank,unit_id,true_rul,predicted_rul\n");
        for (i, u) in self.units.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", i + 1, u.unit_id, u.truth, u.predicted);
        }
        out
    }
}
