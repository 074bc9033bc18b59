//! Work-efficient inclusive associative scan (Brent–Kung up-sweep/down-sweep).
//!
//! The schedule only depends on the sequence length, so it is exposed as a
//! visitor over `(earlier, later)` index pairs. Each visit must fold the
//! accumulated element at `earlier` into the one at `later`
//! (`x[later] = x[earlier] ∘ x[later]`). Within one sweep level the pairs are
//! independent and could be dispatched in parallel.

use super::tensor::{Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Visits the combine steps of an inclusive scan over `n` elements.
pub fn scan_schedule(n: usize, mut combine: impl FnMut(usize, usize)) {
    if n < 2 {
        return;
    }
    let mut stride = 1;
    while stride < n {
        let mut i = 2 * stride - 1;
        while i < n {
            combine(i - stride, i);
            i += 2 * stride;
        }
        stride *= 2;
    }
    stride /= 2;
    while stride >= 1 {
        let mut i = 3 * stride - 1;
        while i < n {
            combine(i - stride, i);
            i += 2 * stride;
        }
        stride /= 2;
    }
}

/// In-place inclusive scan of `items` under an associative `op(earlier, later)`.
pub fn associative_scan<T: Clone>(items: &mut [T], op: impl Fn(&T, &T) -> T) {
    scan_schedule(items.len(), |j, i| {
        items[i] = op(&items[j], &items[i]);
    });
}

/// Solves `h_t = a_t ⊙ h_{t-1} + b_t` for every row `t` by scanning the affine
/// maps `(a_t, b_t)` under `(a₂, b₂) ∘ (a₁, b₁) = (a₂a₁, a₂b₁ + b₂)` and then
/// applying the prefix maps to `h0`.
pub fn linear_recurrence_scan<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    h0: &[F],
) -> Result<Tensor<F>> {
    a.expect_same_dims(b, "linear_recurrence_scan")?;
    let c = a.cols();
    if h0.len() != c {
        return Err(shape_err(
            "linear_recurrence_scan",
            format!("h0 has {} != {c}", h0.len()),
        ));
    }
    let mut acc_a = a.clone();
    let mut acc_b = b.clone();
    {
        let (ad, bd) = (acc_a.data_mut(), acc_b.data_mut());
        scan_schedule(a.rows(), |j, i| {
            let (src, dst) = (j * c, i * c);
            for k in 0..c {
                let a_later = ad[dst + k];
                bd[dst + k] = a_later * bd[src + k] + bd[dst + k];
                ad[dst + k] = a_later * ad[src + k];
            }
        });
    }
    let mut out = acc_b;
    for (row, ar) in out.data_mut().chunks_mut(c).zip(acc_a.data().chunks(c)) {
        for ((h, &pa), &init) in row.iter_mut().zip(ar).zip(h0) {
            *h += pa * init;
        }
    }
    Ok(out)
}
