//! One KV cache for many fine-tuned models.
//!
//! Task models are the frozen base model (the only writer of keys and
//! values) plus low-rank adapters that only read them, so every task model
//! can serve from the same prefix cache. See the guide in `book/` for a
//! walkthrough.

// `!(x > 0.0)` is how NaN gets rejected throughout
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cache;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod model;
pub mod runtime;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/encoder-decoder.md")]
    mod encoder_decoder {}
    #[doc = include_str!("../../../book/src/fused-decode.md")]
    mod fused_decode {}
    #[doc = include_str!("../../../book/src/prefix-cache.md")]
    mod prefix_cache {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/serving.md")]
    mod serving {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
