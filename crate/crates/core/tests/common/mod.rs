//! Plain-loop reference model and helpers shared by the integration tests.
//!
//! Everything here is written from the model description with ordinary
//! nested loops in f64, without calling any kernel from the library.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgdesk::config::{Arch, ModelConfig, Preset};
use rgdesk::layers::{Linear, LocalAttention, ModelParams, RecurrentMix, TemporalMix};
use rgdesk::numerics::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn desk() -> ModelConfig {
    ModelConfig::preset(Preset::Desk)
}

/// Width 8, depth 3 (two recurrent blocks and one attention block).
pub fn tiny(dtype: rgdesk::config::Dtype) -> ModelConfig {
    ModelConfig {
        model_width: 8,
        rnn_width: 8,
        depth: 3,
        num_heads: 2,
        attention_window: 4,
        dtype,
        ..desk()
    }
}

pub fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len)
        .map(|_| rng.random_range(0..vocab as u32))
        .collect()
}

/// Freshly initialised parameters with every tensor nudged by uniform noise,
/// so biases, norm scales and the like are no longer at their trivial values.
pub fn jittered(config: &ModelConfig, arch: Arch, seed: u64, amount: f64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(config, arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    p.visit_mut(&mut |_, t| {
        for v in t.data_mut() {
            *v += rng.random_range(-amount..amount);
        }
    });
    p
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn mat(t: &Tensor<f64>) -> Mat {
    t.data().chunks(t.cols()).map(|r| r.to_vec()).collect()
}

fn vec_of(t: &Tensor<f64>) -> Vec<f64> {
    t.data().to_vec()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn linear(x: &Mat, l: &Linear<Tensor<f64>>) -> Mat {
    let w = mat(&l.weight);
    let out = w[0].len();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| {
                    let b = l.bias.as_ref().map_or(0.0, |b| b.data()[j]);
                    b + row.iter().zip(&w).map(|(xi, wr)| xi * wr[j]).sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn rmsnorm(x: &Mat, scale: &Tensor<f64>) -> Mat {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + 1e-6).sqrt();
            row.iter()
                .zip(scale.data())
                .map(|(v, s)| v * inv * s)
                .collect()
        })
        .collect()
}

fn zip_mul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).collect())
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn recurrent(x: &Mat, m: &RecurrentMix<Tensor<f64>>) -> Mat {
    let g: Mat = linear(x, &m.branch_gelu)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let u = linear(x, &m.branch_rnn);
    let kernel = mat(&m.conv.kernel);
    let k = kernel.len();
    let bias = vec_of(&m.conv.bias);
    let n = bias.len();
    let conv: Mat = (0..u.len())
        .map(|t| {
            (0..n)
                .map(|c| {
                    let mut acc = bias[c];
                    for (j, kr) in kernel.iter().enumerate() {
                        // Row k-1 multiplies the current input.
                        let back = k - 1 - j;
                        if t >= back {
                            acc += kr[c] * u[t - back][c];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect();
    let r = linear(&conv, &m.rglru.gate_a);
    let i = linear(&conv, &m.rglru.gate_x);
    let lambda = vec_of(&m.rglru.log_lambda);
    let c = m.rglru.power_c;
    let mut h = vec![0.0; n];
    let mut hs = Vec::with_capacity(u.len());
    for t in 0..u.len() {
        for ch in 0..n {
            let a = sigmoid(lambda[ch]).powf(c * sigmoid(r[t][ch]));
            h[ch] = a * h[ch] + (1.0 - a * a).sqrt() * sigmoid(i[t][ch]) * conv[t][ch];
        }
        hs.push(h.clone());
    }
    linear(&zip_mul(&g, &hs), &m.out)
}

/// Split-half rotary encoding of one head vector at `pos`.
pub fn rotate(v: &[f64], pos: usize) -> Vec<f64> {
    let d = v.len();
    let half = d / 2;
    let mut out = v.to_vec();
    for i in 0..half {
        let theta = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
        out[i] = v[i] * theta.cos() - v[i + half] * theta.sin();
        out[i + half] = v[i] * theta.sin() + v[i + half] * theta.cos();
    }
    out
}

/// Causal multi-query attention over one fresh sequence. `window` limits how
/// far back each position looks (self included).
pub fn attention(x: &Mat, a: &LocalAttention<Tensor<f64>>, window: Option<usize>) -> Mat {
    let hd = a.head_dim;
    let q = linear(x, &a.q);
    let k: Mat = linear(x, &a.k)
        .iter()
        .enumerate()
        .map(|(t, r)| rotate(r, t))
        .collect();
    let v = linear(x, &a.v);
    let mut mixed = Vec::with_capacity(x.len());
    for t in 0..x.len() {
        let lo = window.map_or(0, |w| (t + 1).saturating_sub(w));
        let mut row = Vec::with_capacity(a.num_heads * hd);
        for h in 0..a.num_heads {
            let qh = rotate(&q[t][h * hd..(h + 1) * hd], t);
            let scores: Vec<f64> = (lo..=t)
                .map(|j| qh.iter().zip(&k[j]).map(|(p, q)| p * q).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..hd {
                row.push((lo..=t).zip(&e).map(|(j, w)| w / z * v[j][c]).sum());
            }
        }
        mixed.push(row);
    }
    linear(&mixed, &a.out)
}

/// Logits `(len, vocab)` for one sequence from an empty state.
pub fn reference_logits(p: &ModelParams<f64>, tokens: &[u32]) -> Mat {
    let table = mat(&p.embed.table);
    let d = table[0].len();
    let mut x: Mat = tokens
        .iter()
        .map(|&t| {
            table[t as usize]
                .iter()
                .map(|v| v * (d as f64).sqrt())
                .collect()
        })
        .collect();
    for block in &p.blocks {
        let n = rmsnorm(&x, &block.temporal_norm);
        let mixed = match &block.mix {
            TemporalMix::Recurrent(m) => recurrent(&n, m),
            TemporalMix::Attention(a) => attention(&n, a, a.window),
        };
        let y = add(&x, &mixed);
        let n2 = rmsnorm(&y, &block.mlp_norm);
        let gate: Mat = linear(&n2, &block.mlp.gate)
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let up = linear(&n2, &block.mlp.up);
        x = add(&y, &linear(&zip_mul(&gate, &up), &block.mlp.down));
    }
    let h = rmsnorm(&x, &p.final_norm);
    h.iter()
        .map(|row| {
            table
                .iter()
                .map(|e| e.iter().zip(row).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

/// Mean next-token cross-entropy of the reference model.
pub fn reference_loss(p: &ModelParams<f64>, tokens: &[u32]) -> f64 {
    let logits = reference_logits(p, &tokens[..tokens.len() - 1]);
    let mut total = 0.0;
    for (row, &target) in logits.iter().zip(&tokens[1..]) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[target as usize];
    }
    total / logits.len() as f64
}

/// Central differences of [`reference_loss`] for every parameter, grouped by
/// tensor name in canonical order.
pub fn finite_difference_grads(
    p: &ModelParams<f64>,
    tokens: &[u32],
    h: f64,
) -> Vec<(String, Vec<f64>)> {
    let names = p.names();
    let sizes: Vec<usize> = p.named_tensors().iter().map(|(_, t)| t.len()).collect();
    let mut out = Vec::with_capacity(names.len());
    for (ti, (name, n)) in names.into_iter().zip(sizes).enumerate() {
        let mut g = Vec::with_capacity(n);
        for e in 0..n {
            let probe = |delta: f64| {
                let mut q = p.clone();
                let mut idx = 0;
                q.visit_mut(&mut |_, t| {
                    if idx == ti {
                        t.data_mut()[e] += delta;
                    }
                    idx += 1;
                });
                reference_loss(&q, tokens)
            };
            g.push((probe(h) - probe(-h)) / (2.0 * h));
        }
        out.push((name, g));
    }
    out
}

/// Every number held in a state, layer by layer.
pub fn state_values<F: rgdesk::numerics::Scalar>(s: &rgdesk::state::InferenceState<F>) -> Vec<f64> {
    use rgdesk::state::LayerState;
    let mut out = Vec::new();
    for layer in &s.layers {
        match layer {
            LayerState::Recurrent { h, conv_tail } => {
                out.extend(h.iter().map(|v| v.as_f64()));
                out.extend(conv_tail.to_f64_vec());
            }
            LayerState::Attention(ring) => {
                for (k, v) in ring.entries() {
                    out.extend(k.iter().chain(v).map(|x| x.as_f64()));
                }
            }
        }
    }
    out
}

pub fn to_f64<F: rgdesk::numerics::Scalar>(v: &[F]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}
