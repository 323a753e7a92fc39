//! Minimal differentiable tensor computation for the Transformer stacks.

pub mod adam;
pub mod graph;
pub mod layers;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Gradients, Graph, NodeId, ParamId, ParamStore};
pub use layers::{
    feed_forward, layer_norm, multi_head_attention, positional_encoding, scaled_dot_attention,
    AttentionParams, EncoderBlock, LinearParams, NormParams, PositionOrigin,
};
pub use tensor::Tensor;
