//! Residual-block ingredients: scaled tied embeddings, the RG-LRU recurrent
//! block, local multi-query attention and the gated MLP.
//!
//! Each layer has an inference path over [`Tensor`]s that advances a
//! per-sequence [`LayerState`](crate::state::LayerState), and a training path
//! that records the same computation on a [`Tape`](crate::numerics::Tape).

pub mod attention;
pub mod block;
pub mod conv;
pub mod embedding;
pub mod linear;
pub mod mlp;
pub mod params;
pub mod rglru;

pub use attention::{attention_over, ATTENTION_ROPE_BASE};
pub use block::forward_blocks;
pub use embedding::{embed, unembed};
pub use params::{
    ConvTail, EmbeddingTable, GatedMlp, Linear, LocalAttention, ModelParams, Parameters,
    RecurrentMix, ResidualBlock, RgLru, TemporalMix, TensorSpec,
};

use crate::numerics::{Scalar, Tensor};

/// A run of consecutive rows that belong to one sequence. Row-wise work
/// (projections, norms, MLP) runs over all rows at once; temporal mixing runs
/// per segment against that sequence's state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    /// Tiles `lens` back to back.
    pub fn tile(lens: &[usize]) -> Vec<Segment> {
        let mut start = 0;
        lens.iter()
            .map(|&len| {
                let s = Segment { start, len };
                start += len;
                s
            })
            .collect()
    }
}

pub(crate) fn take_rows<F: Scalar>(x: &Tensor<F>, seg: Segment) -> Tensor<F> {
    let c = x.cols();
    Tensor::from_vec(
        &[seg.len, c],
        x.data()[seg.start * c..(seg.start + seg.len) * c].to_vec(),
    )
    .expect("segment within tensor")
}

pub(crate) fn put_rows<F: Scalar>(dst: &mut Tensor<F>, seg: Segment, src: &Tensor<F>) {
    let c = dst.cols();
    dst.data_mut()[seg.start * c..(seg.start + seg.len) * c].copy_from_slice(src.data());
}
