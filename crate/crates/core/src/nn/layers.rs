//! Transformer building blocks expressed on [`Graph`] nodes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{domain, Error, Result};

/// Stabilizer added to the variance in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Index of the first sequence position in sinusoidal encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionOrigin {
    #[default]
    Zero,
    One,
}

/// Sinusoidal encodings, `[seq_len, dim]`.
///
/// Column `2j` holds `sin(pos / 10000^(2j/dim))` and column `2j+1` the
/// matching cosine.
pub fn positional_encoding(seq_len: usize, dim: usize, origin: PositionOrigin) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(domain(format!("positional encoding dim must be even, got {dim}")));
    }
    if seq_len == 0 {
        return Err(domain("positional encoding needs at least one position"));
    }
    let offset = match origin {
        PositionOrigin::Zero => 0.0,
        PositionOrigin::One => 1.0,
    };
    let mut values = vec![0.0; seq_len * dim];
    for p in 0..seq_len {
        let pos = p as f64 + offset;
        for j in 0..dim / 2 {
            let angle = pos / 10000f64.powf(2.0 * j as f64 / dim as f64);
            values[p * dim + 2 * j] = angle.sin();
            values[p * dim + 2 * j + 1] = angle.cos();
        }
    }
    Tensor::matrix(seq_len, dim, values)
}

/// `softmax(Q K^T / sqrt(d_k)) V`.
pub fn scaled_dot_attention(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(domain(format!(
            "attention shapes Q{qs:?} K{ks:?} V{vs:?} do not agree"
        )));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (qs[1] as f64).sqrt());
    let weights = g.softmax_rows(scaled);
    g.matmul(weights, v)
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    pub w_o: ParamId,
}

impl AttentionParams {
    /// Per-head `[d, d/h]` projections and a `[d, d]` output map.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        let dk = dim / heads;
        let heads = (0..heads)
            .map(|h| HeadParams {
                w_q: store.add(format!("{prefix}.head{h}.w_q"), uniform(rng, dim, dk)),
                w_k: store.add(format!("{prefix}.head{h}.w_k"), uniform(rng, dim, dk)),
                w_v: store.add(format!("{prefix}.head{h}.w_v"), uniform(rng, dim, dk)),
            })
            .collect();
        let w_o = store.add(format!("{prefix}.w_o"), uniform(rng, dim, dim));
        Ok(Self { heads, w_o })
    }
}

/// Self-attention with `h` heads: `Concat(head_1..head_h) W^O`.
pub fn multi_head_attention(g: &mut Graph, x: NodeId, params: &AttentionParams) -> Result<NodeId> {
    let d = g.value(x).cols();
    let h = params.heads.len();
    if h == 0 || !d.is_multiple_of(h) {
        return Err(Error::Config(format!("model dim {d} is not divisible by {h} heads")));
    }
    let mut outs = Vec::with_capacity(h);
    for head in &params.heads {
        let (wq, wk, wv) = (g.param(head.w_q), g.param(head.w_k), g.param(head.w_v));
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        outs.push(scaled_dot_attention(g, q, k, v)?);
    }
    let cat = g.concat_cols(&outs)?;
    let wo = g.param(params.w_o);
    g.matmul(cat, wo)
}

pub fn layer_norm(g: &mut Graph, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn init(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{prefix}.weight"), uniform(rng, fan_in, fan_out));
        let bound = 1.0 / (fan_in as f64).sqrt();
        let bias_values = (0..fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
        let bias = store.add(
            format!("{prefix}.bias"),
            Tensor::new(vec![fan_out], bias_values).expect("fan_out >= 1"),
        );
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// `relu(x W1 + b1) W2 + b2`.
pub fn feed_forward(g: &mut Graph, x: NodeId, first: &LinearParams, second: &LinearParams) -> Result<NodeId> {
    let hidden = first.forward(g, x)?;
    let act = g.relu(hidden);
    second.forward(g, act)
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        layer_norm(g, x, gain, bias)
    }
}

/// One post-norm encoder layer:
/// `x = LN(x + MHA(x)); x = LN(x + FF(x))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attention: AttentionParams,
    pub norm1: NormParams,
    pub ff1: LinearParams,
    pub ff2: LinearParams,
    pub norm2: NormParams,
}

impl EncoderBlock {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            attention: AttentionParams::init(store, &format!("{prefix}.attn"), dim, heads, rng)?,
            norm1: NormParams::init(store, &format!("{prefix}.norm1"), dim),
            ff1: LinearParams::init(store, &format!("{prefix}.ff1"), dim, ff_hidden, rng),
            ff2: LinearParams::init(store, &format!("{prefix}.ff2"), ff_hidden, dim, rng),
            norm2: NormParams::init(store, &format!("{prefix}.norm2"), dim),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let attn = multi_head_attention(g, x, &self.attention)?;
        let res1 = g.add(x, attn)?;
        let h = self.norm1.forward(g, res1)?;
        let ff = feed_forward(g, h, &self.ff1, &self.ff2)?;
        let res2 = g.add(h, ff)?;
        self.norm2.forward(g, res2)
    }
}

/// `[fan_in, fan_out]` matrix with entries uniform in `±1/sqrt(fan_in)`.
pub fn uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let values = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, values).expect("non-empty dims")
}
