//! A desk-scale hybrid language model: gated linear recurrences (RG-LRU)
//! interleaved with sliding-window multi-query attention, plus everything
//! needed to run it.
//!
//! - [`config`]: shapes, presets and parameter accounting.
//! - [`numerics`]: tensors, kernels, the associative scan and the autodiff tape.
//! - [`layers`]: parameter structures and the forward passes of every block.
//! - [`state`]: per-sequence inference state and its binary format.
//! - [`engine`]: prompt processing, decoding, sampling and batched generation.
//! - [`training`]: loss, gradients and AdamW with a decay mask.
//! - [`checkpoint`]: binary parameter files.
//! - [`chatfmt`]: byte tokenizer and dialogue markup.
//! - [`bench`]: the decode and prompt throughput sweep.
//!
//! ```
//! use rgdesk::config::{Arch, ModelConfig, Preset};
//! use rgdesk::engine::{generate, GenerationRequest};
//! use rgdesk::layers::ModelParams;
//!
//! let params = ModelParams::<f32>::init(&ModelConfig::preset(Preset::Desk), Arch::Recurrent, 0).unwrap();
//! let out = generate(&params, GenerationRequest::new(vec![256, 104, 105], 8)).unwrap();
//! assert_eq!(out.len(), 8);
//! ```

// Comparisons are written so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod chatfmt;
pub mod checkpoint;
pub mod config;
pub mod engine;
pub mod error;
pub mod layers;
pub mod numerics;
pub mod state;
pub mod training;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/chat.md")]
    mod chat {}
    #[doc = include_str!("../../../book/src/bench.md")]
    mod bench {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
