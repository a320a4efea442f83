//! The MolGNet encoder: input embedding, then N layers of T weight-shared
//! steps of neighbor attention, feed-forward and GRU update.

mod batch;
mod config;
mod model;
mod params;

pub use batch::{Arc, ArcKind, BatchedGraph, Segment};
pub use config::{GruBlend, MolGNetConfig, Readout};
pub use model::{
    check_isolated, collection_attention_weights, collection_embedding, embed_inputs, forward, forward_tape,
    gradcheck_model, mean_pool, message_passing_step, neighbor_attention, readout, ForwardOutput, ForwardVars,
};
pub use params::{EmbedParams, LayerParams, MolGNetParams};
