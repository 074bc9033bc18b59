//! Real-gated linear recurrent unit.
//!
//! ```text
//! r_t = σ(W_a x_t + b_a)                 recurrence gate
//! i_t = σ(W_x x_t + b_x)                 input gate
//! a_t = σ(Λ)^(c·r_t) = exp(c·r_t·log σ(Λ))
//! h_t = a_t ⊙ h_{t-1} + √(1 - a_t²) ⊙ (i_t ⊙ x_t)
//! ```
//!
//! `a_t` is formed in log space. On the training tape the square root goes
//! through [`Tape::sqrt_clipped`], so its derivative never exceeds
//! [`SQRT_GRAD_CLIP`] even when `a_t` approaches one.

use crate::error::{shape_err, Error, Result};
use crate::numerics::ops::{self, SQRT_GRAD_CLIP};
use crate::numerics::scan::linear_recurrence_scan;
use crate::numerics::{Scalar, Tape, Tensor, Var};

use super::params::RgLru;

impl<F: Scalar> RgLru<Tensor<F>> {
    pub fn width(&self) -> usize {
        self.log_lambda.len()
    }

    /// Per-row recurrence coefficients `(a_t, b_t)` such that
    /// `h_t = a_t ⊙ h_{t-1} + b_t`.
    pub fn coefficients(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        if x.cols() != self.width() {
            return Err(shape_err(
                "rglru",
                format!("input width {} vs {}", x.cols(), self.width()),
            ));
        }
        let r = ops::sigmoid(&self.gate_a.forward(x)?);
        let i = ops::sigmoid(&self.gate_x.forward(x)?);
        let log_base = ops::log_sigmoid(&self.log_lambda);
        let c = F::of(self.power_c);
        let n = self.width();
        let mut a = r;
        for row in a.data_mut().chunks_mut(n) {
            for (v, &lb) in row.iter_mut().zip(log_base.data()) {
                *v = (c * *v * lb).exp_nonpos();
            }
        }
        let mut b = i;
        for ((bv, &av), &xv) in b.data_mut().iter_mut().zip(a.data()).zip(x.data()) {
            *bv = (F::one() - av * av).sqrt() * *bv * xv;
        }
        Ok((a, b))
    }

    /// One recurrence step.
    pub fn step(&self, x_t: &[F], h_prev: &[F]) -> Result<Vec<F>> {
        if h_prev.len() != self.width() {
            return Err(shape_err("rglru_step", "h_prev width"));
        }
        let x = Tensor::from_vec(&[1, x_t.len()], x_t.to_vec())?;
        let (a, b) = self.coefficients(&x)?;
        Ok(a.data()
            .iter()
            .zip(b.data())
            .zip(h_prev)
            .map(|((&a, &b), &h)| a * h + b)
            .collect())
    }

    /// Runs the recurrence over every row of `x` via an associative scan.
    /// Returns all hidden states and the final one.
    pub fn scan(&self, x: &Tensor<F>, h0: &[F]) -> Result<(Tensor<F>, Vec<F>)> {
        if x.rows() == 0 || x.is_empty() {
            return Err(Error::Empty("rglru_scan over an empty sequence"));
        }
        let (a, b) = self.coefficients(x)?;
        let h = linear_recurrence_scan(&a, &b, h0)?;
        let last = h.row(h.rows() - 1).to_vec();
        Ok((h, last))
    }
}

pub fn rglru_step<F: Scalar>(x_t: &[F], h_prev: &[F], layer: &RgLru<Tensor<F>>) -> Result<Vec<F>> {
    layer.step(x_t, h_prev)
}

pub fn rglru_scan<F: Scalar>(
    x: &Tensor<F>,
    h0: &[F],
    layer: &RgLru<Tensor<F>>,
) -> Result<(Tensor<F>, Vec<F>)> {
    layer.scan(x, h0)
}

impl RgLru<Var> {
    /// Records the recurrence for one sequence starting from `h = 0`.
    pub fn forward_tape<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let r = self.gate_a.forward_tape(tape, x)?;
        let r = tape.sigmoid(r);
        let i = self.gate_x.forward_tape(tape, x)?;
        let i = tape.sigmoid(i);
        let log_base = tape.log_sigmoid(self.log_lambda);
        let cr = tape.affine(r, F::of(self.power_c), F::zero());
        let log_a = tape.mul_row(cr, log_base)?;
        let a = tape.exp(log_a);
        let a2 = tape.mul(a, a)?;
        let one_minus = tape.affine(a2, -F::one(), F::one());
        let gain = tape.sqrt_clipped(one_minus, F::of(SQRT_GRAD_CLIP))?;
        let gated = tape.mul(i, x)?;
        let b = tape.mul(gain, gated)?;
        tape.linear_recurrence(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::params::Linear;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_layer(rng: &mut ChaCha8Rng, n: usize, gate_scale: f64) -> RgLru<Tensor<f64>> {
        let mut m = |dims: &[usize], s: f64| {
            let len = dims.iter().product();
            Tensor::from_vec(dims, (0..len).map(|_| rng.random_range(-s..s)).collect()).unwrap()
        };
        RgLru {
            gate_a: Linear {
                weight: m(&[n, n], gate_scale),
                bias: Some(m(&[n], gate_scale)),
            },
            gate_x: Linear {
                weight: m(&[n, n], gate_scale),
                bias: Some(m(&[n], gate_scale)),
            },
            log_lambda: m(&[n], 3.0),
            power_c: 8.0,
        }
    }

    /// Independent scalar-loop oracle in f64.
    #[allow(clippy::needless_range_loop)]
    fn oracle(layer: &RgLru<Tensor<f64>>, xs: &[Vec<f64>], h0: &[f64]) -> Vec<Vec<f64>> {
        let n = h0.len();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = h0.to_vec();
        let mut out = Vec::new();
        for x in xs {
            let mut next = vec![0.0; n];
            for j in 0..n {
                let mut za = layer.gate_a.bias.as_ref().unwrap().data()[j];
                let mut zx = layer.gate_x.bias.as_ref().unwrap().data()[j];
                for k in 0..n {
                    za += x[k] * layer.gate_a.weight.data()[k * n + j];
                    zx += x[k] * layer.gate_x.weight.data()[k * n + j];
                }
                let (r, i) = (sig(za), sig(zx));
                let a = sig(layer.log_lambda.data()[j]).powf(layer.power_c * r);
                next[j] = a * h[j] + (1.0 - a * a).sqrt() * i * x[j];
            }
            h = next;
            out.push(h.clone());
        }
        out
    }

    #[test]
    fn step_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = random_layer(&mut rng, 4, 1.0);
        let xs: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let h0 = vec![0.3, -0.1, 0.0, 1.0];
        let want = oracle(&layer, &xs, &h0);
        let mut h = h0.clone();
        for (x, w) in xs.iter().zip(&want) {
            h = layer.step(x, &h).unwrap();
            for (a, b) in h.iter().zip(w) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-12), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn scan_matches_step_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let layer = random_layer(&mut rng, 8, 0.5);
        let x = Tensor::from_vec(
            &[16, 8],
            (0..128).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let h0 = vec![0.5; 8];
        let (hs, last) = layer.scan(&x, &h0).unwrap();
        let mut h = h0;
        for t in 0..16 {
            h = layer.step(x.row(t), &h).unwrap();
            for (a, b) in hs.row(t).iter().zip(&h) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-9));
            }
        }
        assert_eq!(last, hs.row(15));
    }

    #[test]
    fn closed_gate_holds_state() {
        // r_t → 0: push gate_a's bias far negative.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut layer = random_layer(&mut rng, 3, 0.5);
        layer.gate_a.bias = Some(Tensor::full(&[3], -1e4));
        let h_prev = vec![0.7, -0.2, 5.0];
        let h = layer.step(&[1.0, 2.0, 3.0], &h_prev).unwrap();
        assert_eq!(h, h_prev);
        let x = Tensor::from_f64(&[4, 3], &[1.0; 12]).unwrap();
        let (hs, _) = layer.scan(&x, &h_prev).unwrap();
        for t in 0..4 {
            assert_eq!(hs.row(t), h_prev.as_slice());
        }
    }

    #[test]
    fn memoryless_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut layer = random_layer(&mut rng, 3, 1.0);
        layer.log_lambda = Tensor::full(&[3], -1e4);
        let x = [0.5, -1.5, 2.0];
        let h = layer.step(&x, &[9.0, 9.0, 9.0]).unwrap();
        let i = ops::sigmoid(
            &layer
                .gate_x
                .forward(&Tensor::from_f64(&[1, 3], &x).unwrap())
                .unwrap(),
        );
        for j in 0..3 {
            assert!((h[j] - i.data()[j] * x[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_scan_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let layer = random_layer(&mut rng, 2, 1.0);
        assert!(matches!(
            layer.scan(&Tensor::zeros(&[0, 2]), &[0.0, 0.0]),
            Err(Error::Empty(_))
        ));
    }
}
