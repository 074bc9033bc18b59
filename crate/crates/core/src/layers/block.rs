//! Pre-norm residual blocks and the full stack.
//!
//! ```text
//! y = x + TemporalMix(rmsnorm(x))
//! y = y + GatedMlp(rmsnorm(y))
//! ```
//!
//! The recurrent temporal mix has two branches of width `rnn_width`: one goes
//! through GELU, the other through the causal conv and then the RG-LRU. Their
//! product is projected back to the model width.

use crate::error::{shape_err, Result};
use crate::numerics::{ops, Scalar, Tape, Tensor, Var};
use crate::state::{InferenceState, LayerState};

use super::params::{Parameters, RecurrentMix, ResidualBlock, TemporalMix};
use super::{put_rows, take_rows, Segment};

impl<F: Scalar> RecurrentMix<Tensor<F>> {
    pub fn forward(
        &self,
        x: &Tensor<F>,
        segments: &[Segment],
        states: &mut [&mut LayerState<F>],
    ) -> Result<Tensor<F>> {
        let gelu_branch = ops::gelu(&self.branch_gelu.forward(x)?);
        let rnn_in = self.branch_rnn.forward(x)?;
        let mut conv_out = Tensor::zeros(rnn_in.dims());
        let mut tails = Vec::with_capacity(segments.len());
        for (seg, state) in segments.iter().zip(states.iter()) {
            let LayerState::Recurrent { conv_tail, .. } = &**state else {
                return Err(shape_err("recurrent block", "state is not recurrent"));
            };
            let (y, tail) = self.conv.apply(&take_rows(&rnn_in, *seg), conv_tail)?;
            put_rows(&mut conv_out, *seg, &y);
            tails.push(tail);
        }
        let mut rnn_out = Tensor::zeros(conv_out.dims());
        for ((seg, state), tail) in segments.iter().zip(states.iter_mut()).zip(tails) {
            let LayerState::Recurrent { h, conv_tail } = &mut **state else {
                unreachable!("checked above")
            };
            let xs = take_rows(&conv_out, *seg);
            if seg.len == 1 {
                let next = self.rglru.step(xs.row(0), h)?;
                rnn_out.row_mut(seg.start).copy_from_slice(&next);
                *h = next;
            } else {
                let (hs, last) = self.rglru.scan(&xs, h)?;
                put_rows(&mut rnn_out, *seg, &hs);
                *h = last;
            }
            *conv_tail = tail;
        }
        self.out.forward(&ops::mul(&gelu_branch, &rnn_out)?)
    }
}

impl<F: Scalar> ResidualBlock<Tensor<F>> {
    /// Runs one block over the rows of `x` (one segment per sequence),
    /// advancing each sequence's state for this block.
    pub fn forward(
        &self,
        x: &Tensor<F>,
        segments: &[Segment],
        states: &mut [&mut LayerState<F>],
    ) -> Result<Tensor<F>> {
        if segments.len() != states.len() {
            return Err(shape_err("residual_block", "one state per segment"));
        }
        let normed = ops::rmsnorm(x, &self.temporal_norm)?;
        let mixed = match &self.mix {
            TemporalMix::Recurrent(r) => r.forward(&normed, segments, states)?,
            TemporalMix::Attention(a) => {
                let mut caches = Vec::with_capacity(states.len());
                for s in states.iter_mut() {
                    match &mut **s {
                        LayerState::Attention(ring) => caches.push(ring),
                        _ => return Err(shape_err("attention block", "state is not attention")),
                    }
                }
                a.forward(&normed, segments, &mut caches)?
            }
        };
        let y = ops::add(x, &mixed)?;
        let mlp = self.mlp.forward(&ops::rmsnorm(&y, &self.mlp_norm)?)?;
        ops::add(&y, &mlp)
    }
}

/// One block, one sequence.
pub fn residual_block<F: Scalar>(
    x: &Tensor<F>,
    block: &ResidualBlock<Tensor<F>>,
    state: &mut LayerState<F>,
) -> Result<Tensor<F>> {
    block.forward(
        x,
        &[Segment {
            start: 0,
            len: x.rows(),
        }],
        &mut [state],
    )
}

/// Runs embedded rows through every block and the final norm, advancing each
/// sequence's state. Returns the normalised hidden rows.
pub fn forward_blocks<F: Scalar>(
    params: &Parameters<Tensor<F>>,
    x: Tensor<F>,
    segments: &[Segment],
    states: &mut [&mut InferenceState<F>],
) -> Result<Tensor<F>> {
    if segments.len() != states.len() {
        return Err(shape_err("forward_blocks", "one state per segment"));
    }
    let mut x = x;
    for (i, block) in params.blocks.iter().enumerate() {
        let mut layer_states: Vec<&mut LayerState<F>> =
            states.iter_mut().map(|s| &mut s.layers[i]).collect();
        x = block.forward(&x, segments, &mut layer_states)?;
    }
    for (seg, s) in segments.iter().zip(states.iter_mut()) {
        s.tokens_processed += seg.len as u64;
    }
    ops::rmsnorm(&x, &params.final_norm)
}

impl ResidualBlock<Var> {
    pub fn forward_tape<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let normed = tape.rmsnorm(x, self.temporal_norm)?;
        let mixed = match &self.mix {
            TemporalMix::Recurrent(r) => {
                let g = r.branch_gelu.forward_tape(tape, normed)?;
                let g = tape.gelu(g);
                let u = r.branch_rnn.forward_tape(tape, normed)?;
                let u = r.conv.forward_tape(tape, u)?;
                let h = r.rglru.forward_tape(tape, u)?;
                let m = tape.mul(g, h)?;
                r.out.forward_tape(tape, m)?
            }
            TemporalMix::Attention(a) => a.forward_tape(tape, normed)?,
        };
        let y = tape.add(x, mixed)?;
        let n2 = tape.rmsnorm(y, self.mlp_norm)?;
        let m = self.mlp.forward_tape(tape, n2)?;
        tape.add(y, m)
    }
}

impl Parameters<Var> {
    /// Records the full model on one fresh sequence and returns the logits
    /// node `(len, vocab)`.
    pub fn logits_tape<F: Scalar>(&self, tape: &mut Tape<F>, tokens: &[u32]) -> Result<Var> {
        let mut x = self.embed.embed_tape(tape, tokens)?;
        for block in &self.blocks {
            x = block.forward_tape(tape, x)?;
        }
        let x = tape.rmsnorm(x, self.final_norm)?;
        self.embed.unembed_tape(tape, x)
    }
}
