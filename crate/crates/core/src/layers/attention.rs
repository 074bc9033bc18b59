//! Local multi-query attention.
//!
//! All `num_heads` query heads read a single shared key/value head. Position
//! `t` attends to positions `max(0, t - window + 1) ..= t`, so a cache of
//! exactly `window` entries is enough for decoding. Rotary encoding
//! (base [`ATTENTION_ROPE_BASE`]) is applied per head to queries and to the
//! shared key before keys enter the cache.

use crate::error::{shape_err, Result};
use crate::numerics::ops::{self, Band};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::state::KvRing;

use super::params::LocalAttention;
use super::{put_rows, take_rows, Segment};

pub const ATTENTION_ROPE_BASE: f64 = 10_000.0;

/// Attention of query rows `q: (T, num_heads·head_dim)` over one shared
/// key/value head stored row-major as `(n, head_dim)` in `keys` and `values`.
/// Row `t` sees key rows `support(t)` (half-open). Scores are scaled by
/// `1/√head_dim`.
pub fn attention_over<F: Scalar>(
    q: &Tensor<F>,
    keys: &[F],
    values: &[F],
    num_heads: usize,
    head_dim: usize,
    support: impl Fn(usize) -> (usize, usize),
) -> Result<Tensor<F>> {
    if q.cols() != num_heads * head_dim
        || keys.len() != values.len()
        || head_dim == 0
        || !keys.len().is_multiple_of(head_dim)
    {
        return Err(shape_err(
            "attention",
            format!(
                "q {:?}, {num_heads} heads of {head_dim}, {} key / {} value values",
                q.dims(),
                keys.len(),
                values.len()
            ),
        ));
    }
    let n = keys.len() / head_dim;
    let scale = F::one() / F::of(head_dim as f64).sqrt();
    let mut out = Tensor::zeros(q.dims());
    // Query transposed to (head_dim, num_heads) and pre-scaled, so one key
    // row updates every head's score at once.
    let mut qt = vec![F::zero(); num_heads * head_dim];
    // probs[j * num_heads + h]
    let mut probs: Vec<F> = Vec::new();
    for t in 0..q.rows() {
        let (lo, hi) = support(t);
        if lo >= hi || hi > n {
            return Err(shape_err(
                "attention",
                format!("support {lo}..{hi} of {n} keys"),
            ));
        }
        let ks = &keys[lo * head_dim..hi * head_dim];
        let vs = &values[lo * head_dim..hi * head_dim];
        for (h, qh) in q.row(t).chunks_exact(head_dim).enumerate() {
            for (c, &v) in qh.iter().enumerate() {
                qt[c * num_heads + h] = v * scale;
            }
        }
        probs.clear();
        probs.resize(num_heads * (hi - lo), F::zero());
        let o_row = out.row_mut(t);
        macro_rules! dispatch {
            ($(($h:literal, $d:literal)),*) => {
                match (num_heads, head_dim) {
                    $(($h, $d) => heads_kernel::<F, $h, $d>(&qt, ks, vs, &mut probs, o_row),)*
                    _ => heads_generic(num_heads, &qt, ks, vs, &mut probs, o_row),
                }
            };
        }
        dispatch!(
            (1, 16),
            (1, 32),
            (2, 16),
            (2, 32),
            (4, 16),
            (4, 32),
            (8, 16),
            (8, 32)
        );
    }
    Ok(out)
}

/// Head count and head size fixed at compile time so the inner loops unroll.
#[inline(never)]
fn heads_kernel<F: Scalar, const H: usize, const D: usize>(
    qt: &[F],
    ks: &[F],
    vs: &[F],
    probs: &mut [F],
    out: &mut [F],
) {
    let hd = D;
    for (k, p) in ks.chunks_exact(hd).zip(probs.chunks_exact_mut(H)) {
        let mut acc = [F::zero(); H];
        for (&kc, qc) in k.iter().zip(qt.chunks_exact(H)) {
            for h in 0..H {
                acc[h] += qc[h] * kc;
            }
        }
        p.copy_from_slice(&acc);
    }
    let mut m = [F::neg_infinity(); H];
    for p in probs.chunks_exact(H) {
        for h in 0..H {
            if p[h] > m[h] {
                m[h] = p[h];
            }
        }
    }
    for p in probs.chunks_exact_mut(H) {
        for h in 0..H {
            p[h] = (p[h] - m[h]).exp_nonpos();
        }
    }
    let mut sum = [F::zero(); H];
    for p in probs.chunks_exact(H) {
        for h in 0..H {
            sum[h] += p[h];
        }
    }
    for (h, o) in out.chunks_exact_mut(hd).enumerate() {
        for (p, v) in probs.chunks_exact(H).zip(vs.chunks_exact(hd)) {
            let w = p[h];
            for (o, &vc) in o.iter_mut().zip(v) {
                *o += w * vc;
            }
        }
        let inv = F::one() / sum[h];
        for o in o.iter_mut() {
            *o *= inv;
        }
    }
}

fn heads_generic<F: Scalar>(
    nh: usize,
    qt: &[F],
    ks: &[F],
    vs: &[F],
    probs: &mut [F],
    out: &mut [F],
) {
    let hd = qt.len() / nh;
    for (k, p) in ks.chunks_exact(hd).zip(probs.chunks_exact_mut(nh)) {
        for (&kc, qc) in k.iter().zip(qt.chunks_exact(nh)) {
            for (p, &q) in p.iter_mut().zip(qc) {
                *p += q * kc;
            }
        }
    }
    for h in 0..nh {
        let m = probs[h..]
            .iter()
            .step_by(nh)
            .fold(F::neg_infinity(), |m, &s| m.max(s));
        let mut sum = F::zero();
        for p in probs[h..].iter_mut().step_by(nh) {
            *p = (*p - m).exp_nonpos();
            sum += *p;
        }
        let inv = F::one() / sum;
        let o = &mut out[h * hd..(h + 1) * hd];
        for (j, v) in vs.chunks_exact(hd).enumerate() {
            let w = probs[j * nh + h];
            for (o, &vc) in o.iter_mut().zip(v) {
                *o += w * vc;
            }
        }
        for o in o.iter_mut() {
            *o *= inv;
        }
    }
}

impl<F: Scalar> LocalAttention<Tensor<F>> {
    /// Attends each segment of `x` against its cache and appends the
    /// segment's keys/values to that cache.
    pub fn forward(
        &self,
        x: &Tensor<F>,
        segments: &[Segment],
        caches: &mut [&mut KvRing<F>],
    ) -> Result<Tensor<F>> {
        if segments.len() != caches.len() {
            return Err(shape_err("local_attention", "one cache per segment"));
        }
        let hd = self.head_dim;
        let q_all = self.q.forward(x)?;
        let k_all = self.k.forward(x)?;
        let v_all = self.v.forward(x)?;
        let mut mixed = Tensor::zeros(q_all.dims());
        for (seg, cache) in segments.iter().zip(caches.iter_mut()) {
            if cache.capacity() != self.window || cache.head_dim() != hd {
                return Err(shape_err(
                    "local_attention",
                    format!(
                        "cache capacity {:?} / head_dim {} for window {:?} / head_dim {hd}",
                        cache.capacity(),
                        cache.head_dim(),
                        self.window
                    ),
                ));
            }
            let start = cache.position() as usize;
            let q = ops::rope(&take_rows(&q_all, *seg), hd, start, ATTENTION_ROPE_BASE)?;
            let k = ops::rope(&take_rows(&k_all, *seg), hd, start, ATTENTION_ROPE_BASE)?;
            let v = take_rows(&v_all, *seg);
            let cached = cache.len();
            let out = match self.window {
                // Unbounded: append first, then read the cache in place.
                None => {
                    for t in 0..seg.len {
                        cache.push(k.row(t), v.row(t));
                    }
                    let (ks, vs) = cache.in_order().expect("unbounded caches stay in order");
                    attention_over(&q, ks, vs, self.num_heads, hd, |t| (0, cached + t + 1))?
                }
                Some(w) => {
                    let (ck, cv) = cache.to_matrices();
                    let mut ks = ck.into_data();
                    ks.extend_from_slice(k.data());
                    let mut vs = cv.into_data();
                    vs.extend_from_slice(v.data());
                    let out = attention_over(&q, &ks, &vs, self.num_heads, hd, |t| {
                        let hi = cached + t + 1;
                        (hi.saturating_sub(w), hi)
                    })?;
                    for t in 0..seg.len {
                        cache.push(k.row(t), v.row(t));
                    }
                    out
                }
            };
            put_rows(&mut mixed, *seg, &out);
        }
        self.out.forward(&mixed)
    }
}

impl LocalAttention<Var> {
    /// Records attention for one fresh sequence (positions from 0).
    pub fn forward_tape<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let hd = self.head_dim;
        let q = self.q.forward_tape(tape, x)?;
        let q = tape.rope(q, hd, 0, ATTENTION_ROPE_BASE)?;
        let k = self.k.forward_tape(tape, x)?;
        let k = tape.rope(k, hd, 0, ATTENTION_ROPE_BASE)?;
        let v = self.v.forward_tape(tape, x)?;
        let scale = F::one() / F::of(hd as f64).sqrt();
        let band = Band {
            window: self.window,
        };
        let mut heads = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let s = tape.matmul_nt(qh, k)?;
            let s = tape.affine(s, scale, F::zero());
            let p = tape.masked_softmax(s, band)?;
            heads.push(tape.matmul(p, v)?);
        }
        let o = tape.concat_cols(&heads)?;
        self.out.forward_tape(tape, o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::params::Linear;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn layer(
        rng: &mut ChaCha8Rng,
        d: usize,
        heads: usize,
        window: Option<usize>,
    ) -> LocalAttention<Tensor<f64>> {
        let hd = d / heads;
        LocalAttention {
            q: Linear {
                weight: rand_t(rng, &[d, d]),
                bias: None,
            },
            k: Linear {
                weight: rand_t(rng, &[d, hd]),
                bias: None,
            },
            v: Linear {
                weight: rand_t(rng, &[d, hd]),
                bias: None,
            },
            out: Linear {
                weight: rand_t(rng, &[d, d]),
                bias: Some(rand_t(rng, &[d])),
            },
            num_heads: heads,
            head_dim: hd,
            window,
        }
    }

    #[test]
    fn support_sets_for_window_two() {
        // One head, head_dim 2, keys chosen so each query picks up a unique
        // signature of the keys it can see.
        let q = Tensor::from_f64(&[3, 2], &[0.0; 6]).unwrap();
        let keys = [0.0; 6];
        let values = [1.0, 0.0, 0.0, 1.0, 10.0, 10.0];
        let band = Band { window: Some(2) };
        let out = attention_over(&q, &keys, &values, 1, 2, |t| band.support(t, 3)).unwrap();
        // uniform weights over {0}, {0,1}, {1,2}
        assert_eq!(out.row(0), &[1.0, 0.0]);
        assert_eq!(out.row(1), &[0.5, 0.5]);
        assert_eq!(out.row(2), &[5.0, 5.5]);
    }

    #[test]
    fn ring_occupancy_tracks_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let att = layer(&mut rng, 8, 2, Some(8));
        let mut ring = KvRing::new(4, Some(8));
        for t in 0..100 {
            let x = rand_t(&mut rng, &[1, 8]);
            att.forward(&x, &[Segment { start: 0, len: 1 }], &mut [&mut ring])
                .unwrap();
            assert_eq!(ring.len(), (t + 1).min(8));
        }
        assert_eq!(ring.len(), 8);
    }

    #[test]
    fn capacity_mismatch_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let att = layer(&mut rng, 8, 2, Some(8));
        let mut ring = KvRing::new(4, Some(4));
        let x = rand_t(&mut rng, &[1, 8]);
        assert!(att
            .forward(&x, &[Segment { start: 0, len: 1 }], &mut [&mut ring])
            .is_err());
    }

    #[test]
    fn prompt_then_steps_equals_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let att = layer(&mut rng, 8, 2, Some(3));
        let x = rand_t(&mut rng, &[7, 8]);
        let mut whole_ring = KvRing::new(4, Some(3));
        let whole = att
            .forward(&x, &[Segment { start: 0, len: 7 }], &mut [&mut whole_ring])
            .unwrap();
        let mut ring = KvRing::new(4, Some(3));
        let first = att
            .forward(
                &take_rows(&x, Segment { start: 0, len: 4 }),
                &[Segment { start: 0, len: 4 }],
                &mut [&mut ring],
            )
            .unwrap();
        for t in 0..4 {
            assert_eq!(first.row(t), whole.row(t));
        }
        for t in 4..7 {
            let y = att
                .forward(
                    &take_rows(&x, Segment { start: t, len: 1 }),
                    &[Segment { start: 0, len: 1 }],
                    &mut [&mut ring],
                )
                .unwrap();
            for (a, b) in y.row(0).iter().zip(whole.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(ring, whole_ring);
    }
}
