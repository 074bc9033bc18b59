#![allow(clippy::needless_range_loop)]

mod common;

use common::rel_err;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgdesk::layers::attention_over;
use rgdesk::numerics::ops;
use rgdesk::numerics::scan::linear_recurrence_scan;
use rgdesk::numerics::{Band, Scalar, Tape, Tensor, Var};

fn rand_t(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Compares the tape gradient of `build` with central differences. The op
/// output is reduced to a scalar through a cross-entropy against fixed
/// targets, so every output element matters.
fn check_op(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let eval = |inputs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = build(&mut tape, &vars);
        let y = if tape.value(y).dims().len() == 1 {
            let n = tape.value(y).len();
            let t = tape.value(y).clone().reshape(&[1, n]).unwrap();
            tape.leaf(t)
        } else {
            y
        };
        let rows = tape.value(y).rows();
        let cols = tape.value(y).cols();
        let targets: Vec<u32> = (0..rows).map(|r| ((r * 7 + 3) % cols) as u32).collect();
        let loss = tape.cross_entropy(y, &targets).unwrap();
        (tape, vars, loss)
    };
    let (tape, vars, loss) = eval(&inputs);
    let grads = tape.backward(loss).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get(*v).expect("every input reaches the loss");
        let mut fd = Vec::with_capacity(inputs[i].len());
        for e in 0..inputs[i].len() {
            let probe = |d: f64| {
                let mut moved = inputs.clone();
                moved[i].data_mut()[e] += d;
                let (t, _, l) = eval(&moved);
                t.value(l).data()[0]
            };
            fd.push((probe(1e-6) - probe(-1e-6)) / 2e-6);
        }
        let err = rel_err(g.data(), &fd);
        assert!(err < 1e-6, "input {i}: {err:e}");
    }
}

#[test]
fn primitive_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut r = |dims: &[usize]| rand_t(&mut rng, dims, -1.0, 1.0);
    let (a, b, c) = (r(&[5, 4]), r(&[4, 6]), r(&[6, 4]));
    check_op(vec![a.clone(), b.clone()], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    check_op(vec![a.clone(), c.clone()], |t, v| {
        t.matmul_nt(v[0], v[1]).unwrap()
    });
    let (x, y, row) = (r(&[5, 6]), r(&[5, 6]), r(&[6]));
    check_op(vec![x.clone(), y.clone()], |t, v| {
        t.mul(v[0], v[1]).unwrap()
    });
    check_op(vec![x.clone(), y.clone()], |t, v| {
        t.add(v[0], v[1]).unwrap()
    });
    check_op(vec![x.clone(), row.clone()], |t, v| {
        t.add_row(v[0], v[1]).unwrap()
    });
    check_op(vec![x.clone(), row.clone()], |t, v| {
        t.mul_row(v[0], v[1]).unwrap()
    });
    check_op(vec![x.clone()], |t, v| t.affine(v[0], 1.7, -0.3));
    check_op(vec![x.clone()], |t, v| t.sigmoid(v[0]));
    check_op(vec![x.clone()], |t, v| t.log_sigmoid(v[0]));
    check_op(vec![x.clone()], |t, v| t.exp(v[0]));
    check_op(vec![x.scale_by(3.0)], |t, v| t.gelu(v[0]));
    check_op(vec![x.clone(), row.clone()], |t, v| {
        t.rmsnorm(v[0], v[1]).unwrap()
    });
    check_op(vec![x.map(|v| v.abs() + 0.2)], |t, v| {
        t.sqrt_clipped(v[0], 1000.0).unwrap()
    });
    check_op(vec![x.clone()], |t, v| {
        t.rope(v[0], 6, 3, 10_000.0).unwrap()
    });
    check_op(vec![x.clone()], |t, v| t.slice_cols(v[0], 1, 3).unwrap());
    check_op(vec![x.clone(), y.clone()], |t, v| {
        t.concat_cols(&[v[0], v[1]]).unwrap()
    });
    check_op(vec![r(&[7, 3])], |t, v| {
        t.gather(v[0], &[0, 2, 2, 6, 1]).unwrap()
    });
    let s = r(&[6, 6]);
    for w in [None, Some(1), Some(3)] {
        check_op(vec![s.clone()], move |t, v| {
            t.masked_softmax(v[0], Band { window: w }).unwrap()
        });
    }
    let decay = x.map(|v| 0.5 + 0.4 * v);
    check_op(vec![decay, y.clone()], |t, v| {
        t.linear_recurrence(v[0], v[1]).unwrap()
    });
    check_op(vec![x.clone(), r(&[3, 6]), row.clone()], |t, v| {
        t.causal_conv(v[0], v[1], v[2]).unwrap()
    });
}

trait ScaleBy {
    fn scale_by(&self, s: f64) -> Self;
}

impl ScaleBy for Tensor<f64> {
    fn scale_by(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }
}

#[test]
fn scan_matches_sequential_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for len in (1..70).chain([127, 128, 129, 300]) {
        let a = rand_t(&mut rng, &[len, 5], 0.0, 1.0);
        let b = rand_t(&mut rng, &[len, 5], -1.0, 1.0);
        let h0: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 0.5).collect();
        let mut h = h0.clone();
        let mut want = Vec::new();
        for t in 0..len {
            for j in 0..5 {
                h[j] = a.row(t)[j] * h[j] + b.row(t)[j];
            }
            want.extend_from_slice(&h);
        }
        let got = linear_recurrence_scan(&a, &b, &h0).unwrap();
        assert!(rel_err(got.data(), &want) < 1e-13, "len {len}");
        let seq = ops::linear_recurrence(&a, &b, &h0).unwrap();
        assert!(rel_err(seq.data(), &want) < 1e-15);
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (m, k, n) in [(1, 1, 1), (3, 5, 7), (4, 8, 8), (9, 17, 13), (33, 64, 259)] {
        let a = rand_t(&mut rng, &[m, k], -1.0, 1.0);
        let b = rand_t(&mut rng, &[k, n], -1.0, 1.0);
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    want[i * n + j] += a.row(i)[p] * b.row(p)[j];
                }
            }
        }
        assert!(rel_err(ops::matmul(&a, &b).unwrap().data(), &want) < 1e-14);
        // Each output row is independent of how many rows come with it.
        let one = Tensor::from_vec(&[1, k], a.row(m - 1).to_vec()).unwrap();
        assert_eq!(
            ops::matmul(&one, &b).unwrap().data(),
            ops::matmul(&a, &b).unwrap().row(m - 1)
        );
    }
}

fn naive_attention(
    q: &Tensor<f64>,
    k: &[f64],
    v: &[f64],
    heads: usize,
    hd: usize,
    support: &dyn Fn(usize) -> (usize, usize),
) -> Vec<f64> {
    let mut out = Vec::new();
    for t in 0..q.rows() {
        let (lo, hi) = support(t);
        for h in 0..heads {
            let qh = &q.row(t)[h * hd..(h + 1) * hd];
            let s: Vec<f64> = (lo..hi)
                .map(|j| {
                    qh.iter()
                        .zip(&k[j * hd..(j + 1) * hd])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / (hd as f64).sqrt()
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for c in 0..hd {
                out.push(
                    (lo..hi)
                        .zip(&s)
                        .map(|(j, x)| (x - m).exp() / z * v[j * hd + c])
                        .sum(),
                );
            }
        }
    }
    out
}

#[test]
fn attention_matches_naive_for_all_head_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (heads, hd) in [(1, 16), (4, 16), (8, 32), (3, 6), (5, 16), (2, 10)] {
        let n = 11;
        let q = rand_t(&mut rng, &[6, heads * hd], -2.0, 2.0);
        let k = rand_t(&mut rng, &[n, hd], -2.0, 2.0).into_data();
        let v = rand_t(&mut rng, &[n, hd], -2.0, 2.0).into_data();
        let support = |t: usize| (t.saturating_sub(3), t + 6);
        let got = attention_over(&q, &k, &v, heads, hd, support).unwrap();
        let want = naive_attention(&q, &k, &v, heads, hd, &support);
        assert!(rel_err(got.data(), &want) < 1e-12, "{heads}x{hd}");
    }
}

#[test]
fn f32_softmax_exp_is_accurate() {
    let mut worst = 0.0f64;
    for i in 0..=100_000 {
        let x = -87.0 * i as f64 / 100_000.0;
        let got = (x as f32).exp_nonpos() as f64;
        let want = (x as f32 as f64).exp();
        worst = worst.max((got - want).abs() / want);
    }
    assert!(worst < 2e-7, "{worst:e}");
    assert_eq!((-200.0f32).exp_nonpos(), 0.0);
    assert_eq!(0.0f32.exp_nonpos(), 1.0);
}
