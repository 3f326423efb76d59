//! The decoder-only transformer split into a frozen encoder and adapter
//! decoders.
//!
//! [`BaseWeights`] is the logical encoder: the only producer of KV entries.
//! A logical decoder is the same base weights plus an [`AdapterSet`]; it
//! reads the encoder's KV cache but never writes to it.

mod adapter;
pub mod checkpoint;
mod config;
mod kv;
mod layer;
mod weights;

pub use adapter::{AdapterLookup, AdapterSet, ConventionalAdapters, KvAdapters, LayerAdapters, LowRank};
pub use config::ModelConfig;
pub use kv::{Branch, KvCacheTensor, KvView};
pub use layer::{
    block_forward, block_forward_single, block_forward_two_pass, embed, icarus_linear, layer_attention, lm_logits,
    Phase,
};
pub use weights::{BaseWeights, LayerWeights, WeightId, WeightKind};
