//! Next-token training at desk scale.
//!
//! Gradients come from recording the model on a [`Tape`]; the RG-LRU square
//! root goes through the clipped derivative there. The optimizer is AdamW
//! with decoupled weight decay, and the RG-LRU gate weights, gate biases and
//! `Λ` are never decayed.

use crate::chatfmt::encode_text;
use crate::error::{Error, Result};
use crate::layers::params::is_decay_exempt;
use crate::layers::{embed, forward_blocks, unembed, ModelParams, Parameters, Segment};
use crate::numerics::{ops, Scalar, Tape, Tensor, Var};
use crate::state::InferenceState;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_global_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 3e-3,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            clip_global_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Domain(format!("optimizer: {m}")));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if matches!(self.clip_global_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_global_norm must be positive");
        }
        Ok(())
    }
}

/// Which tensors skip weight decay, in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecayMask {
    flags: Vec<(String, bool)>,
}

impl DecayMask {
    pub fn for_params<P>(params: &Parameters<P>) -> Self {
        DecayMask {
            flags: params
                .names()
                .into_iter()
                .map(|n| {
                    let e = is_decay_exempt(&n);
                    (n, e)
                })
                .collect(),
        }
    }

    pub fn from_flags(flags: Vec<(String, bool)>) -> Self {
        DecayMask { flags }
    }

    pub fn flags(&self) -> &[(String, bool)] {
        &self.flags
    }

    pub fn is_exempt(&self, name: &str) -> bool {
        self.flags.iter().any(|(n, e)| n == name && *e)
    }

    pub fn exempt_names(&self) -> impl Iterator<Item = &str> {
        self.flags
            .iter()
            .filter(|(_, e)| *e)
            .map(|(n, _)| n.as_str())
    }
}

fn split_targets(tokens: &[u32]) -> Result<(&[u32], &[u32])> {
    if tokens.len() < 2 {
        return Err(Error::Domain(format!(
            "loss needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    Ok((&tokens[..tokens.len() - 1], &tokens[1..]))
}

/// Mean cross-entropy of predicting `tokens[t]` from `tokens[..t]` for
/// `t = 1..L`.
pub fn loss<F: Scalar>(params: &ModelParams<F>, tokens: &[u32]) -> Result<F> {
    let (inputs, targets) = split_targets(tokens)?;
    let mut state = InferenceState::fresh(&params.config, params.arch)?;
    let x = embed(inputs, &params.embed)?;
    let seg = [Segment {
        start: 0,
        len: inputs.len(),
    }];
    let hidden = forward_blocks(params, x, &seg, &mut [&mut state])?;
    let logits = unembed(&hidden, &params.embed)?;
    ops::cross_entropy(&logits, targets)
}

/// Mean of [`loss`] over sequences.
pub fn batch_loss<F: Scalar>(params: &ModelParams<F>, batch: &[Vec<u32>]) -> Result<F> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let mut total = F::zero();
    for seq in batch {
        total += loss(params, seq)?;
    }
    Ok(total / F::of(batch.len() as f64))
}

/// Loss and the gradient of every parameter tensor for one sequence.
pub fn backward<F: Scalar>(params: &ModelParams<F>, tokens: &[u32]) -> Result<(F, ModelParams<F>)> {
    let (inputs, targets) = split_targets(tokens)?;
    let mut tape = Tape::new();
    let vars: Parameters<Var> = params.map(&mut |_, t| tape.leaf(t.clone()));
    let logits = vars.logits_tape(&mut tape, inputs)?;
    let loss = tape.cross_entropy(logits, targets)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let g = vars.map(&mut |_, v| {
        grads
            .take(*v)
            .unwrap_or_else(|| Tensor::zeros(tape.value(*v).dims()))
    });
    Ok((value, g))
}

/// Mean loss and mean gradients over sequences.
pub fn batch_backward<F: Scalar>(
    params: &ModelParams<F>,
    batch: &[Vec<u32>],
) -> Result<(F, ModelParams<F>)> {
    let Some((first, rest)) = batch.split_first() else {
        return Err(Error::Empty("training batch"));
    };
    let (mut total, mut acc) = backward(params, first)?;
    for seq in rest {
        let (l, g) = backward(params, seq)?;
        total += l;
        let flat: Vec<Tensor<F>> = g
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        let mut i = 0;
        let mut res = Ok(());
        acc.visit_mut(&mut |_, t| {
            if res.is_ok() {
                res = t.add_assign(&flat[i]);
            }
            i += 1;
        });
        res?;
    }
    let inv = F::one() / F::of(batch.len() as f64);
    acc.visit_mut(&mut |_, t| {
        for v in t.data_mut() {
            *v *= inv;
        }
    });
    Ok((total * inv, acc))
}

pub fn global_norm<F: Scalar>(grads: &ModelParams<F>) -> f64 {
    grads
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// AdamW state: first and second moments per tensor.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: OptimizerConfig,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    steps: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(params: &ModelParams<F>, config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor<F>> = params
            .named_tensors()
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.dims()))
            .collect();
        Ok(AdamW {
            config,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. Non-exempt tensors are first scaled by `1 - lr·wd`;
    /// exempt ones only receive the Adam step.
    pub fn step(
        &mut self,
        params: &mut ModelParams<F>,
        grads: &ModelParams<F>,
        mask: &DecayMask,
    ) -> Result<()> {
        let grads: Vec<(String, &Tensor<F>)> = grads.named_tensors();
        if grads.len() != self.m.len() {
            return Err(crate::error::shape_err("optimizer_step", "gradient count"));
        }
        let c = self.config;
        let clip_scale = match c.clip_global_norm {
            Some(max) => {
                let n: f64 = grads
                    .iter()
                    .flat_map(|(_, t)| t.data().iter())
                    .map(|v| v.as_f64().powi(2))
                    .sum::<f64>()
                    .sqrt();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let bc1 = F::of(1.0 - c.beta1.powi(t));
        let bc2 = F::of(1.0 - c.beta2.powi(t));
        let lr = F::of(c.learning_rate);
        let eps = F::of(c.eps);
        let shrink = F::of(1.0 - c.learning_rate * c.weight_decay);
        let gscale = F::of(clip_scale);

        let mut i = 0;
        let mut res = Ok(());
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |name, p| {
            if res.is_err() {
                return;
            }
            let (gname, g) = &grads[i];
            if gname != name || g.dims() != p.dims() {
                res = Err(crate::error::shape_err(
                    "optimizer_step",
                    format!("gradient for {name}"),
                ));
                return;
            }
            let decay = !mask.is_exempt(name);
            let (m, v) = (m_all[i].data_mut(), v_all[i].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gv = gv * gscale;
                *mv = b1 * *mv + (F::one() - b1) * gv;
                *vv = b2 * *vv + (F::one() - b2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
                if decay {
                    *pv = *pv * shrink - lr * update;
                } else {
                    *pv -= lr * update;
                }
            }
            i += 1;
        });
        res
    }
}

/// Runs `steps` full-batch updates, returning the loss measured before each.
pub fn train<F: Scalar>(
    params: &mut ModelParams<F>,
    optimizer: &mut AdamW<F>,
    mask: &DecayMask,
    batch: &[Vec<u32>],
    steps: usize,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(steps);
    for s in 0..steps {
        let (l, g) = batch_backward(params, batch)?;
        let l = l.as_f64();
        if !l.is_finite() {
            return Err(Error::Domain(format!("loss became {l} at step {s}")));
        }
        optimizer.step(params, &g, mask)?;
        on_step(s, l);
        losses.push(l);
    }
    Ok(losses)
}

/// Cuts a text corpus into byte-token sequences of `seq_len` tokens. A short
/// tail is kept if it has at least two tokens.
pub fn corpus_sequences(text: &str, seq_len: usize) -> Result<Vec<Vec<u32>>> {
    if seq_len < 2 {
        return Err(Error::Domain("sequence length must be at least 2".into()));
    }
    let ids = encode_text(text);
    let seqs: Vec<Vec<u32>> = ids
        .chunks(seq_len)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect();
    if seqs.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    Ok(seqs)
}
