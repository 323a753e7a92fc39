//! Jensen-Shannon nearest neighbours over a library of training priors.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, validation, Error, Result};
use crate::ingest::{read_json, write_json};
use crate::FORMAT_VERSION;

/// Allowed deviation of a distribution's total mass from 1.
pub const MASS_TOLERANCE: f64 = 1e-9;

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(domain("distribution has negative or non-finite entries"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(domain(format!("distribution sums to {total}, not 1")));
    }
    Ok(())
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(domain(format!(
            "distributions have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p)?;
    check_distribution(q)
}

fn kl_terms(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        total += pi * (pi / qi).ln();
    }
    total
}

/// `KL(p || q)` in nats. `+inf` when `p` has mass where `q` has none.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(kl_terms(p, q).max(0.0))
}

fn js_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let mut to_p = 0.0;
    let mut to_q = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let mi = 0.5 * (pi + qi);
        if pi > 0.0 {
            to_p += pi * (pi / mi).ln();
        }
        if qi > 0.0 {
            to_q += qi * (qi / mi).ln();
        }
    }
    (0.5 * to_p + 0.5 * to_q).clamp(0.0, std::f64::consts::LN_2)
}

/// Jensen-Shannon divergence in nats, within `[0, ln 2]`.
pub fn js(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(js_unchecked(p, q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub system_id: u32,
    pub window_id: u32,
    pub pi: Vec<f64>,
    pub rul: f64,
}

/// Priors with known RUL, searched exhaustively.
///
/// On disk:
///
/// ```json
/// { "format": "latent-rul/library", "format_version": 1, "n_states": 25,
///   "model_fingerprint": "<sha256 hex>",
///   "entries": [{"system_id": 1, "window_id": 1, "pi": [...], "rul": 125.0}] }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorLibrary {
    pub format: String,
    pub format_version: u32,
    pub n_states: usize,
    /// Fingerprint of the model that produced the priors, if any.
    pub model_fingerprint: Option<String>,
    pub entries: Vec<LibraryEntry>,
}

pub const LIBRARY_FORMAT: &str = "latent-rul/library";

impl PriorLibrary {
    pub fn new(n_states: usize, model_fingerprint: Option<String>) -> Self {
        Self {
            format: LIBRARY_FORMAT.to_string(),
            format_version: FORMAT_VERSION,
            n_states,
            model_fingerprint,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: LibraryEntry) -> Result<()> {
        self.check_entry(&entry)?;
        self.entries.push(entry);
        Ok(())
    }

    fn check_entry(&self, e: &LibraryEntry) -> Result<()> {
        if e.pi.len() != self.n_states {
            return Err(validation(format!(
                "entry {}/{} has {} states, library has {}",
                e.system_id,
                e.window_id,
                e.pi.len(),
                self.n_states
            )));
        }
        check_distribution(&e.pi).map_err(|err| {
            validation(format!("entry {}/{}: {err}", e.system_id, e.window_id))
        })?;
        if !(e.rul >= 0.0) {
            return Err(validation(format!(
                "entry {}/{} has negative RUL {}",
                e.system_id, e.window_id, e.rul
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != LIBRARY_FORMAT || self.format_version != FORMAT_VERSION {
            return Err(validation(format!(
                "unsupported library file {} v{}",
                self.format, self.format_version
            )));
        }
        self.entries.iter().try_for_each(|e| self.check_entry(e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lib: Self = read_json(path)?;
        lib.validate()?;
        Ok(lib)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub system_id: u32,
    pub window_id: u32,
    pub rul: f64,
    pub divergence: f64,
}

/// Up to `k` library entries, closest first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub neighbors: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.divergence
        .total_cmp(&b.divergence)
        .then(a.system_id.cmp(&b.system_id))
        .then(a.window_id.cmp(&b.window_id))
}

/// The `k` entries with the smallest JS divergence to `query`, ignoring
/// entries of `exclude_system`. Ties go to the lower `(system_id, window_id)`.
pub fn nearest(
    query: &[f64],
    library: &PriorLibrary,
    k: usize,
    exclude_system: Option<u32>,
) -> Result<NeighborSet> {
    if k == 0 {
        return Err(Error::Query("k must be at least 1".into()));
    }
    if query.len() != library.n_states {
        return Err(domain(format!(
            "query has {} states, library has {}",
            query.len(),
            library.n_states
        )));
    }
    check_distribution(query)?;

    let mut scored: Vec<Neighbor> = library
        .entries
        .par_iter()
        .filter(|e| Some(e.system_id) != exclude_system)
        .map(|e| Neighbor {
            system_id: e.system_id,
            window_id: e.window_id,
            rul: e.rul,
            divergence: js_unchecked(query, &e.pi),
        })
        .collect();
    if scored.is_empty() {
        return Err(Error::Query("no eligible library entries".into()));
    }
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, neighbor_order);
        scored.truncate(k);
    }
    scored.sort_by(neighbor_order);
    Ok(NeighborSet { neighbors: scored })
}

/// Mean RUL of the neighbours.
pub fn predict_rul(neighbors: &NeighborSet) -> Result<f64> {
    if neighbors.is_empty() {
        return Err(Error::Query("cannot predict from an empty neighbour set".into()));
    }
    Ok(neighbors.neighbors.iter().map(|n| n.rul).sum::<f64>() / neighbors.len() as f64)
}
