//! Vector quantization of the encoder output.
//!
//! Each row of the continuous latent block is replaced by its nearest
//! codebook entry. Training uses three squared-L2 terms: the task loss on the
//! decoder output, a codebook term that only moves the selected embeddings,
//! and a commitment term (weighted by `beta`) that only moves the encoder.

use rand::Rng;

use crate::error::{domain, Result};
use crate::nn::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    /// Codebook index per latent row.
    pub indices: Vec<usize>,
    /// Selected codebook rows, `[S, E]`.
    pub z_q: Tensor,
    /// Encoder output the selection was made from, `[S, E]`.
    pub z_e: Tensor,
}

/// Codebook rows uniform in `[-1/N_e, 1/N_e]`.
pub fn init_codebook(entries: usize, dim: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if entries < 2 {
        return Err(domain(format!("codebook needs at least 2 entries, got {entries}")));
    }
    let bound = 1.0 / entries as f64;
    let values = (0..entries * dim)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(entries, dim, values)
}

/// Index of the nearest codebook row under squared Euclidean distance.
/// Ties go to the smallest index.
pub fn nearest_code(row: &[f64], codebook: &Tensor) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for k in 0..codebook.rows() {
        let dist: f64 = row
            .iter()
            .zip(codebook.row(k))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if dist < best_dist {
            best = k;
            best_dist = dist;
        }
    }
    best
}

pub fn quantize(z_e: &Tensor, codebook: &Tensor) -> Result<QuantizationResult> {
    if z_e.shape().len() != 2 || codebook.shape().len() != 2 || z_e.cols() != codebook.cols() {
        return Err(domain(format!(
            "latent block {:?} does not match codebook {:?}",
            z_e.shape(),
            codebook.shape()
        )));
    }
    let indices: Vec<usize> = (0..z_e.rows())
        .map(|r| nearest_code(z_e.row(r), codebook))
        .collect();
    let values: Vec<f64> = indices.iter().flat_map(|&k| codebook.row(k).to_vec()).collect();
    Ok(QuantizationResult {
        z_q: Tensor::matrix(indices.len(), codebook.cols(), values)?,
        z_e: z_e.clone(),
        indices,
    })
}

/// Graph node whose value is `z_q` and whose gradient flows to `z_e`.
pub fn straight_through(g: &mut Graph, z_e: NodeId, z_q: NodeId) -> Result<NodeId> {
    g.straight_through(z_e, z_q)
}

#[derive(Debug, Clone, Copy)]
pub struct VqLossNodes {
    pub total: NodeId,
    pub task: NodeId,
    pub codebook: NodeId,
    pub commitment: NodeId,
}

/// The three-term objective.
///
/// * `task = (prediction - target)^2`
/// * `codebook = ||sg(z_e) - e||^2` where `e = selected` (gradient to the codebook)
/// * `commitment = beta * ||z_e - sg(e)||^2` (gradient to the encoder)
///
/// `sg_z_e` and `sg_selected` are the stopped-gradient stand-ins; callers
/// normally pass `g.stop_grad(..)` of the live nodes.
#[allow(clippy::too_many_arguments)]
pub fn vq_loss(
    g: &mut Graph,
    prediction: NodeId,
    target: NodeId,
    z_e: NodeId,
    sg_z_e: NodeId,
    selected: NodeId,
    sg_selected: NodeId,
    beta: f64,
) -> Result<VqLossNodes> {
    if beta < 0.0 {
        return Err(domain(format!("beta must be non-negative, got {beta}")));
    }
    let err = g.sub(prediction, target)?;
    let task = g.sum_squares(err);

    let diff_cb = g.sub(sg_z_e, selected)?;
    let codebook = g.sum_squares(diff_cb);

    let diff_commit = g.sub(z_e, sg_selected)?;
    let commit_sq = g.sum_squares(diff_commit);
    let commitment = g.scale(commit_sq, beta);

    let partial = g.add(task, codebook)?;
    let total = g.add(partial, commitment)?;
    Ok(VqLossNodes {
        total,
        task,
        codebook,
        commitment,
    })
}
