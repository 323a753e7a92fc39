//! Encoder → vector quantizer → decoder.
//!
//! The encoder projects each `T x F` window to the model width, adds
//! sinusoidal positions, runs a stack of post-norm Transformer layers and
//! maps the flattened result to `S` latent vectors of width `E`. Each vector
//! is snapped to the codebook. The decoder is another encoder-style stack
//! over the `S` quantized vectors; its mean-pooled output feeds a linear RUL
//! head. Targets are scaled by the RUL cap during training, so the head
//! works on `[0, 1]` and inference multiplies back.

mod io;
mod train;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::ingest::{FeatureSpec, NormalizationStats, TimeWindow};
use crate::nn::{
    positional_encoding, EncoderBlock, Graph, LinearParams, NodeId, ParamId, ParamStore,
    PositionOrigin, Tensor,
};
use crate::rng::{stream_rng, Stream};
use crate::vq::{self, QuantizationResult, VqLossNodes};

pub use io::{ModelFile, NamedTensor, MODEL_FORMAT};
pub use train::EpochLog;

/// What the decoder is trained to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Predict the (capped) RUL of the window.
    #[default]
    Rul,
    /// Reconstruct the input window. Experimental; the RUL head is absent.
    Reconstruction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub window_length: usize,
    pub features: usize,
    /// Number of latent vectors per window (S).
    pub latent_seq: usize,
    /// Width of each latent vector (E).
    pub latent_dim: usize,
    /// Number of codebook entries (N_e).
    pub codebook_size: usize,
    pub model_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    /// Feed-forward hidden width as a multiple of `model_dim`.
    pub ff_multiplier: usize,
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub rul_cap: f64,
    pub position_origin: PositionOrigin,
    pub objective: Objective,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window_length: 20,
            features: 17,
            latent_seq: 10,
            latent_dim: 32,
            codebook_size: 25,
            model_dim: 48,
            encoder_layers: 3,
            encoder_heads: 3,
            decoder_layers: 2,
            decoder_heads: 3,
            ff_multiplier: 4,
            beta: 0.25,
            learning_rate: 2e-4,
            epochs: 100,
            batch_size: 100,
            seed: 0,
            rul_cap: 125.0,
            position_origin: PositionOrigin::Zero,
            objective: Objective::Rul,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window_length", self.window_length),
            ("features", self.features),
            ("latent_dim", self.latent_dim),
            ("model_dim", self.model_dim),
            ("encoder_layers", self.encoder_layers),
            ("encoder_heads", self.encoder_heads),
            ("decoder_heads", self.decoder_heads),
            ("ff_multiplier", self.ff_multiplier),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.latent_seq < 2 {
            return Err(Error::Config("latent_seq must be at least 2 to form transitions".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be at least 2".into()));
        }
        if !self.model_dim.is_multiple_of(2) {
            return Err(Error::Config("model_dim must be even for positional encodings".into()));
        }
        for (what, heads) in [("encoder", self.encoder_heads), ("decoder", self.decoder_heads)] {
            if !self.model_dim.is_multiple_of(heads) {
                return Err(Error::Config(format!(
                    "model_dim {} is not divisible by {heads} {what} heads",
                    self.model_dim
                )));
            }
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.rul_cap > 0.0) {
            return Err(Error::Config("rul_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Head {
    Rul(LinearParams),
    Reconstruction(LinearParams),
}

#[derive(Debug, Clone)]
struct Layout {
    input: LinearParams,
    encoder: Vec<EncoderBlock>,
    to_latent: LinearParams,
    codebook: ParamId,
    from_latent: LinearParams,
    decoder: Vec<EncoderBlock>,
    head: Head,
}

impl Layout {
    fn build(config: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let d = config.model_dim;
        let ff = d * config.ff_multiplier;
        let input = LinearParams::init(store, "encoder.input", config.features, d, rng);
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderBlock::init(store, &format!("encoder.layer{i}"), d, config.encoder_heads, ff, rng))
            .collect::<Result<Vec<_>>>()?;
        let to_latent = LinearParams::init(
            store,
            "encoder.to_latent",
            config.window_length * d,
            config.latent_seq * config.latent_dim,
            rng,
        );
        let mut cb_rng = stream_rng(config.seed, Stream::Codebook);
        let codebook = store.add(
            "codebook",
            vq::init_codebook(config.codebook_size, config.latent_dim, &mut cb_rng)?,
        );
        let from_latent = LinearParams::init(store, "decoder.input", config.latent_dim, d, rng);
        let decoder = (0..config.decoder_layers)
            .map(|i| EncoderBlock::init(store, &format!("decoder.layer{i}"), d, config.decoder_heads, ff, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = match config.objective {
            Objective::Rul => Head::Rul(LinearParams::init(store, "decoder.rul_head", d, 1, rng)),
            Objective::Reconstruction => Head::Reconstruction(LinearParams::init(
                store,
                "decoder.reconstruction_head",
                config.latent_seq * d,
                config.window_length * config.features,
                rng,
            )),
        };
        Ok(Self {
            input,
            encoder,
            to_latent,
            codebook,
            from_latent,
            decoder,
            head,
        })
    }
}

/// Values frozen at one parameter point, standing in for every
/// stop-gradient and for the codebook selection. With these fixed the loss
/// is an ordinary differentiable function whose gradient equals the
/// straight-through gradient at that point, which lets finite differences
/// verify the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPoint {
    pub indices: Vec<usize>,
    pub z_e: Tensor,
    pub z_q: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub enum LossMode<'a> {
    Live,
    Frozen(&'a FrozenPoint),
}

#[derive(Debug, Clone)]
pub struct LossGraph {
    pub nodes: VqLossNodes,
    pub z_e: NodeId,
    pub indices: Vec<usize>,
}

/// A trained (or freshly initialized) model with the preprocessing it expects.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub feature_spec: FeatureSpec,
    pub stats: NormalizationStats,
    pub training_log: Vec<EpochLog>,
    params: ParamStore,
    layout: Layout,
    encoder_positions: Tensor,
    decoder_positions: Tensor,
}

impl Model {
    pub fn init(config: ModelConfig, feature_spec: FeatureSpec, stats: NormalizationStats) -> Result<Self> {
        config.validate()?;
        if feature_spec.feature_count() != config.features || stats.feature_count() != config.features {
            return Err(Error::Config(format!(
                "config expects {} features; feature spec has {}, stats have {}",
                config.features,
                feature_spec.feature_count(),
                stats.feature_count()
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = stream_rng(config.seed, Stream::ParamInit);
        let layout = Layout::build(&config, &mut store, &mut rng)?;
        let encoder_positions =
            positional_encoding(config.window_length, config.model_dim, config.position_origin)?;
        let decoder_positions =
            positional_encoding(config.latent_seq, config.model_dim, config.position_origin)?;
        Ok(Self {
            config,
            feature_spec,
            stats,
            training_log: Vec::new(),
            params: store,
            layout,
            encoder_positions,
            decoder_positions,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable access for optimizers and gradient checks.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn codebook(&self) -> &Tensor {
        self.params.get(self.layout.codebook)
    }

    pub fn codebook_id(&self) -> ParamId {
        self.layout.codebook
    }

    fn window_tensor(&self, values: &[Vec<f64>]) -> Result<Tensor> {
        let (t, f) = (self.config.window_length, self.config.features);
        if values.len() != t || values.iter().any(|r| r.len() != f) {
            return Err(domain(format!(
                "window must be {t}x{f}, got {}x{}",
                values.len(),
                values.first().map_or(0, Vec::len)
            )));
        }
        Tensor::from_rows(values)
    }

    fn encode_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let l = &self.layout;
        let projected = l.input.forward(g, x)?;
        let pe = g.constant(self.encoder_positions.clone());
        let mut h = g.add(projected, pe)?;
        for block in &l.encoder {
            h = block.forward(g, h)?;
        }
        let flat = g.reshape(h, vec![1, self.config.window_length * self.config.model_dim])?;
        let latent = l.to_latent.forward(g, flat)?;
        g.reshape(latent, vec![self.config.latent_seq, self.config.latent_dim])
    }

    /// Decoder head output: `[1, 1]` scaled RUL, or `[T, F]` reconstruction.
    fn decode_graph(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let l = &self.layout;
        let projected = l.from_latent.forward(g, z)?;
        let pe = g.constant(self.decoder_positions.clone());
        let mut h = g.add(projected, pe)?;
        for block in &l.decoder {
            h = block.forward(g, h)?;
        }
        match &l.head {
            Head::Rul(head) => {
                let pooled = g.mean_rows(h);
                head.forward(g, pooled)
            }
            Head::Reconstruction(head) => {
                let flat = g.reshape(h, vec![1, self.config.latent_seq * self.config.model_dim])?;
                let out = head.forward(g, flat)?;
                g.reshape(out, vec![self.config.window_length, self.config.features])
            }
        }
    }

    /// Continuous latent block `z_e`, `[S, E]`.
    pub fn encode(&self, window: &[Vec<f64>]) -> Result<Tensor> {
        let x = self.window_tensor(window)?;
        let mut g = Graph::new(&self.params);
        let xn = g.constant(x);
        let z = self.encode_graph(&mut g, xn)?;
        Ok(g.value(z).clone())
    }

    pub fn quantize(&self, z_e: &Tensor) -> Result<QuantizationResult> {
        vq::quantize(z_e, self.codebook())
    }

    /// Unclamped decoder RUL for a quantized block, in cycles.
    pub fn decode_raw(&self, z_q: &Tensor) -> Result<f64> {
        if z_q.shape() != [self.config.latent_seq, self.config.latent_dim] {
            return Err(domain(format!(
                "decoder input must be [{}, {}], got {:?}",
                self.config.latent_seq,
                self.config.latent_dim,
                z_q.shape()
            )));
        }
        if self.config.objective != Objective::Rul {
            return Err(Error::Config("model was trained for reconstruction; no RUL head".into()));
        }
        let mut g = Graph::new(&self.params);
        let z = g.constant(z_q.clone());
        let out = self.decode_graph(&mut g, z)?;
        Ok(g.value(out).values()[0] * self.config.rul_cap)
    }

    /// Decoder RUL clamped to `[0, rul_cap]`.
    pub fn decode(&self, z_q: &Tensor) -> Result<f64> {
        Ok(clamp_rul(self.decode_raw(z_q)?, self.config.rul_cap))
    }

    /// Codebook indices assigned to a window.
    pub fn latent_states(&self, window: &[Vec<f64>]) -> Result<Vec<usize>> {
        Ok(self.quantize(&self.encode(window)?)?.indices)
    }

    /// Latent states for many windows, computed in parallel, returned in input order.
    pub fn latent_states_batch(&self, windows: &[TimeWindow]) -> Result<Vec<Vec<usize>>> {
        windows
            .par_iter()
            .map(|w| self.latent_states(&w.values))
            .collect()
    }

    /// Direct decoder prediction for a window (not the divergence-based one).
    pub fn predict_direct(&self, window: &[Vec<f64>]) -> Result<f64> {
        let q = self.quantize(&self.encode(window)?)?;
        self.decode(&q.z_q)
    }

    /// Selection and stop-gradient values at the current parameters.
    pub fn frozen_point(&self, window: &[Vec<f64>]) -> Result<FrozenPoint> {
        let q = self.quantize(&self.encode(window)?)?;
        Ok(FrozenPoint {
            indices: q.indices,
            z_e: q.z_e,
            z_q: q.z_q,
        })
    }

    /// Records the training objective for one window on `g`.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        window: &[Vec<f64>],
        rul_target: f64,
        mode: LossMode<'_>,
    ) -> Result<LossGraph> {
        let x = g.constant(self.window_tensor(window)?);
        self.loss_graph_from_node(g, x, rul_target, mode)
    }

    fn loss_graph_from_node(
        &self,
        g: &mut Graph,
        x: NodeId,
        rul_target: f64,
        mode: LossMode<'_>,
    ) -> Result<LossGraph> {
        let z_e = self.encode_graph(g, x)?;
        let cb = g.param(self.layout.codebook);
        let (indices, selected, sg_z_e, sg_selected, decoder_input) = match mode {
            LossMode::Live => {
                let q = vq::quantize(g.value(z_e), g.value(cb))?;
                let selected = g.gather_rows(cb, &q.indices)?;
                let sg_z_e = g.stop_grad(z_e);
                let sg_selected = g.stop_grad(selected);
                let st = vq::straight_through(g, z_e, selected)?;
                (q.indices, selected, sg_z_e, sg_selected, st)
            }
            LossMode::Frozen(point) => {
                let selected = g.gather_rows(cb, &point.indices)?;
                let sg_z_e = g.constant(point.z_e.clone());
                let sg_selected = g.constant(point.z_q.clone());
                let offset = g.constant(point.z_q.zip_map(&point.z_e, |q, e| q - e)?);
                let shifted = g.add(z_e, offset)?;
                (point.indices.clone(), selected, sg_z_e, sg_selected, shifted)
            }
        };
        let prediction = self.decode_graph(g, decoder_input)?;
        let target = match self.config.objective {
            Objective::Rul => g.constant(Tensor::matrix(1, 1, vec![rul_target / self.config.rul_cap])?),
            Objective::Reconstruction => x,
        };
        let nodes = vq::vq_loss(
            g,
            prediction,
            target,
            z_e,
            sg_z_e,
            selected,
            sg_selected,
            self.config.beta,
        )?;
        Ok(LossGraph { nodes, z_e, indices })
    }
}

/// Inference-time clamp of a RUL estimate.
pub fn clamp_rul(raw: f64, cap: f64) -> f64 {
    raw.clamp(0.0, cap)
}
