//! Primitive dense operations, each with a forward function and the matching
//! vector-Jacobian product (`*_backward`). The tape in [`super::tape`] records
//! these and nothing coarser.

use crate::error::{shape_err, Error, Result};

use super::tensor::{Scalar, Tensor};

/// Epsilon added to the mean square inside the root of [`rmsnorm`].
pub const RMSNORM_EPS: f64 = 1e-6;

/// Default ceiling for the derivative of the square root in the recurrence.
pub const SQRT_GRAD_CLIP: f64 = 1000.0;

fn expect_matrix<F: Scalar>(t: &Tensor<F>, op: &'static str) -> Result<()> {
    if t.dims().len() != 2 {
        return Err(shape_err(
            op,
            format!("expected a matrix, got dims {:?}", t.dims()),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Raw kernels on slices. `out` is accumulated into, never cleared.

/// `out[m×n] += a[m×k] · b[k×n]`
///
/// Works on register tiles of four rows by eight columns. Every output
/// element starts from its current value and adds `a[i,p]·b[p,j]` for `p` in
/// ascending order, whichever tile it lands in, so a row's result does not
/// depend on `m`.
pub fn gemm_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let full = m / 4 * 4;
    for i in (0..full).step_by(4) {
        gemm_rows::<F, 4>(
            &a[i * k..(i + 4) * k],
            b,
            &mut out[i * n..(i + 4) * n],
            k,
            n,
        );
    }
    for i in full..m {
        gemm_rows::<F, 1>(
            &a[i * k..(i + 1) * k],
            b,
            &mut out[i * n..(i + 1) * n],
            k,
            n,
        );
    }
}

#[inline(always)]
fn gemm_rows<F: Scalar, const R: usize>(a: &[F], b: &[F], out: &mut [F], k: usize, n: usize) {
    const C: usize = 8;
    let tiles = n / C * C;
    for j0 in (0..tiles).step_by(C) {
        let mut acc = [[F::zero(); C]; R];
        for r in 0..R {
            acc[r].copy_from_slice(&out[r * n + j0..r * n + j0 + C]);
        }
        for p in 0..k {
            let bv: &[F; C] = b[p * n + j0..p * n + j0 + C].try_into().expect("tile");
            for r in 0..R {
                let x = a[r * k + p];
                for l in 0..C {
                    acc[r][l] += x * bv[l];
                }
            }
        }
        for r in 0..R {
            out[r * n + j0..r * n + j0 + C].copy_from_slice(&acc[r]);
        }
    }
    for j in tiles..n {
        for r in 0..R {
            let mut acc = out[r * n + j];
            for p in 0..k {
                acc += a[r * k + p] * b[p * n + j];
            }
            out[r * n + j] = acc;
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn gemm_tn_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &b_ij) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * b_ij;
            }
        }
    }
}

/// Dot product with four interleaved partial sums.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ar.iter().zip(br) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    let e = (-x.abs()).exp_nonpos();
    let r = F::one() / (F::one() + e);
    if x >= F::zero() {
        r
    } else {
        e * r
    }
}

/// `log σ(x) = -softplus(-x)`, stable for large |x|.
#[inline]
pub fn log_sigmoid_scalar<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `0.5·x·(1 + tanh u)` written as `x·σ(2u)`, which needs one `exp`.
#[inline]
pub fn gelu_scalar<F: Scalar>(x: F) -> F {
    let u = F::of(GELU_K) * (x + F::of(GELU_A) * x * x * x);
    x * sigmoid_scalar(u + u)
}

#[inline]
fn gelu_grad_scalar<F: Scalar>(x: F) -> F {
    let k = F::of(GELU_K);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let u = k * (x + a * x * x * x);
    let s = sigmoid_scalar(u + u);
    let t = s + s - F::one();
    let du = k * (F::one() + F::of(3.0) * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

// ---------------------------------------------------------------------------
// Matrix products

pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    expect_matrix(a, "matmul")?;
    expect_matrix(b, "matmul")?;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(shape_err(
            "matmul",
            format!("{:?} x {:?}", a.dims(), b.dims()),
        ));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_acc(a.data(), b.data(), out.data_mut(), m, k, n);
    Ok(out)
}

/// Returns `(da, db)` for `c = a·b`.
pub fn matmul_backward<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    grad: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>) {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut da = Tensor::zeros(a.dims());
    let mut db = Tensor::zeros(b.dims());
    gemm_nt_acc(grad.data(), b.data(), da.data_mut(), m, n, k);
    gemm_tn_acc(a.data(), grad.data(), db.data_mut(), m, k, n);
    (da, db)
}

/// `a · bᵀ`, with `a: (m, k)` and `b: (n, k)`.
pub fn matmul_nt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    expect_matrix(a, "matmul_nt")?;
    expect_matrix(b, "matmul_nt")?;
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    if b.cols() != k {
        return Err(shape_err(
            "matmul_nt",
            format!("{:?} x {:?}ᵀ", a.dims(), b.dims()),
        ));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nt_acc(a.data(), b.data(), out.data_mut(), m, k, n);
    Ok(out)
}

pub fn matmul_nt_backward<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    grad: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>) {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut da = Tensor::zeros(a.dims());
    let mut db = Tensor::zeros(b.dims());
    gemm_acc(grad.data(), b.data(), da.data_mut(), m, n, k);
    gemm_tn_acc(grad.data(), a.data(), db.data_mut(), m, n, k);
    (da, db)
}

// ---------------------------------------------------------------------------
// Elementwise and broadcasting

pub fn add<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn mul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    a.zip_map(b, "mul", |x, y| x * y)
}

pub fn mul_backward<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    grad: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>) {
    (
        grad.zip_map(b, "mul_backward", |g, y| g * y)
            .expect("same dims"),
        grad.zip_map(a, "mul_backward", |g, x| g * x)
            .expect("same dims"),
    )
}

fn expect_row<F: Scalar>(x: &Tensor<F>, row: &Tensor<F>, op: &'static str) -> Result<()> {
    if row.len() != x.cols() || row.dims().len() != 1 {
        return Err(shape_err(
            op,
            format!("{:?} with row {:?}", x.dims(), row.dims()),
        ));
    }
    Ok(())
}

/// `x + bias` with `bias` broadcast over rows.
pub fn add_row<F: Scalar>(x: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    expect_row(x, bias, "add_row")?;
    let mut out = x.clone();
    let c = x.cols();
    for r in out.data_mut().chunks_mut(c) {
        for (o, &b) in r.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Column sums, i.e. the bias gradient of [`add_row`].
pub fn sum_rows<F: Scalar>(grad: &Tensor<F>) -> Tensor<F> {
    let c = grad.cols();
    let mut out = vec![F::zero(); c];
    for r in grad.data().chunks(c) {
        for (o, &g) in out.iter_mut().zip(r) {
            *o += g;
        }
    }
    Tensor::vector(out)
}

/// `x ⊙ v` with `v` broadcast over rows.
pub fn mul_row<F: Scalar>(x: &Tensor<F>, v: &Tensor<F>) -> Result<Tensor<F>> {
    expect_row(x, v, "mul_row")?;
    let mut out = x.clone();
    let c = x.cols();
    for r in out.data_mut().chunks_mut(c) {
        for (o, &s) in r.iter_mut().zip(v.data()) {
            *o *= s;
        }
    }
    Ok(out)
}

pub fn mul_row_backward<F: Scalar>(
    x: &Tensor<F>,
    v: &Tensor<F>,
    grad: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>) {
    let dx = mul_row(grad, v).expect("checked in forward");
    let c = x.cols();
    let mut dv = vec![F::zero(); c];
    for (xr, gr) in x.data().chunks(c).zip(grad.data().chunks(c)) {
        for ((d, &xv), &g) in dv.iter_mut().zip(xr).zip(gr) {
            *d += xv * g;
        }
    }
    (dx, Tensor::vector(dv))
}

/// `alpha · x + beta`.
pub fn affine<F: Scalar>(x: &Tensor<F>, alpha: F, beta: F) -> Tensor<F> {
    x.map(|v| alpha * v + beta)
}

pub fn sigmoid<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(sigmoid_scalar)
}

/// Takes the forward output `y = σ(x)`.
pub fn sigmoid_backward<F: Scalar>(y: &Tensor<F>, grad: &Tensor<F>) -> Tensor<F> {
    grad.zip_map(y, "sigmoid_backward", |g, s| g * s * (F::one() - s))
        .expect("same dims")
}

pub fn log_sigmoid<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(log_sigmoid_scalar)
}

pub fn log_sigmoid_backward<F: Scalar>(x: &Tensor<F>, grad: &Tensor<F>) -> Tensor<F> {
    grad.zip_map(x, "log_sigmoid_backward", |g, v| g * sigmoid_scalar(-v))
        .expect("same dims")
}

pub fn exp<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v.exp())
}

pub fn gelu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(gelu_scalar)
}

pub fn gelu_backward<F: Scalar>(x: &Tensor<F>, grad: &Tensor<F>) -> Tensor<F> {
    grad.zip_map(x, "gelu_backward", |g, v| g * gelu_grad_scalar(v))
        .expect("same dims")
}

/// Elementwise square root. Negative inputs are rejected.
pub fn sqrt<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if let Some(v) = x.data().iter().find(|v| **v < F::zero()) {
        return Err(Error::Domain(format!("sqrt of negative value {v}")));
    }
    Ok(x.map(|v| v.sqrt()))
}

/// Backward of `√x` with the derivative capped at `clip`:
/// `upstream ⊙ min(1/(2√x), clip)`. At `x = 0` this saturates to
/// `upstream · clip` instead of diverging.
pub fn sqrt_clipped_backward<F: Scalar>(
    x: &Tensor<F>,
    upstream: &Tensor<F>,
    clip: F,
) -> Result<Tensor<F>> {
    x.expect_same_dims(upstream, "sqrt_clipped_backward")?;
    if !(clip > F::zero()) {
        return Err(Error::Domain(format!("clip must be positive, got {clip}")));
    }
    let mut out = Vec::with_capacity(x.len());
    for (&v, &g) in x.data().iter().zip(upstream.data()) {
        if v < F::zero() {
            return Err(Error::Domain(format!(
                "sqrt_clipped_backward of negative value {v}"
            )));
        }
        let raw = F::one() / (F::of(2.0) * v.sqrt());
        out.push(g * raw.min(clip));
    }
    Tensor::from_vec(x.dims(), out)
}

// ---------------------------------------------------------------------------
// Normalisations

/// Row-wise softmax over the last axis.
pub fn softmax<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    masked_softmax(x, None)
}

/// Row-wise softmax restricted to a causal band: in row `i`, column `j`
/// participates iff `j <= i` and `i - j < window`. With `window = None` the
/// mask is dropped entirely (plain softmax). Masked entries come out as zero.
pub fn masked_softmax<F: Scalar>(x: &Tensor<F>, band: Option<Band>) -> Result<Tensor<F>> {
    let c = x.cols();
    if c == 0 || x.is_empty() {
        return Err(Error::Empty("softmax over an empty axis"));
    }
    let mut out = Tensor::zeros(x.dims());
    for (i, (xr, or)) in x
        .data()
        .chunks(c)
        .zip(out.data_mut().chunks_mut(c))
        .enumerate()
    {
        let (lo, hi) = match band {
            Some(b) => b.support(i, c),
            None => (0, c),
        };
        let row = &xr[lo..hi];
        let m = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut sum = F::zero();
        for (o, &v) in or[lo..hi].iter_mut().zip(row) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in &mut or[lo..hi] {
            *o = *o / sum;
        }
    }
    Ok(out)
}

/// Takes the forward output `y`.
pub fn softmax_backward<F: Scalar>(y: &Tensor<F>, grad: &Tensor<F>) -> Tensor<F> {
    let c = y.cols();
    let mut out = Tensor::zeros(y.dims());
    for ((yr, gr), or) in y
        .data()
        .chunks(c)
        .zip(grad.data().chunks(c))
        .zip(out.data_mut().chunks_mut(c))
    {
        let s = dot(yr, gr);
        for ((o, &yv), &g) in or.iter_mut().zip(yr).zip(gr) {
            *o = yv * (g - s);
        }
    }
    out
}

/// Causal banded attention mask for square score matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Band {
    /// `None` keeps the full causal prefix.
    pub window: Option<usize>,
}

impl Band {
    /// Half-open column range visible from row `i`.
    pub fn support(self, i: usize, cols: usize) -> (usize, usize) {
        let hi = (i + 1).min(cols);
        let lo = match self.window {
            Some(w) => (i + 1).saturating_sub(w),
            None => 0,
        };
        (lo.min(hi), hi)
    }
}

/// `x / sqrt(mean(x²) + eps) ⊙ scale`, row-wise.
pub fn rmsnorm<F: Scalar>(x: &Tensor<F>, scale: &Tensor<F>) -> Result<Tensor<F>> {
    expect_row(x, scale, "rmsnorm")?;
    let c = x.cols();
    let eps = F::of(RMSNORM_EPS);
    let inv_c = F::one() / F::of(c as f64);
    let mut out = x.clone();
    for r in out.data_mut().chunks_mut(c) {
        let ms = r.iter().fold(F::zero(), |a, &v| a + v * v) * inv_c;
        let inv = F::one() / (ms + eps).sqrt();
        for (o, &s) in r.iter_mut().zip(scale.data()) {
            *o = *o * inv * s;
        }
    }
    Ok(out)
}

/// Returns `(dx, dscale)`.
pub fn rmsnorm_backward<F: Scalar>(
    x: &Tensor<F>,
    scale: &Tensor<F>,
    grad: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>) {
    let c = x.cols();
    let eps = F::of(RMSNORM_EPS);
    let inv_c = F::one() / F::of(c as f64);
    let mut dx = Tensor::zeros(x.dims());
    let mut dscale = vec![F::zero(); c];
    let mut dxhat = vec![F::zero(); c];
    for ((xr, gr), dr) in x
        .data()
        .chunks(c)
        .zip(grad.data().chunks(c))
        .zip(dx.data_mut().chunks_mut(c))
    {
        let ms = xr.iter().fold(F::zero(), |a, &v| a + v * v) * inv_c;
        let inv = F::one() / (ms + eps).sqrt();
        let mut proj = F::zero();
        for j in 0..c {
            let xhat = xr[j] * inv;
            dscale[j] += gr[j] * xhat;
            dxhat[j] = gr[j] * scale.data()[j];
            proj += dxhat[j] * xhat;
        }
        proj *= inv_c;
        for j in 0..c {
            dr[j] = inv * (dxhat[j] - xr[j] * inv * proj);
        }
    }
    (dx, Tensor::vector(dscale))
}

// ---------------------------------------------------------------------------
// Sequence primitives

/// First-order linear recurrence over rows: `h_t = a_t ⊙ h_{t-1} + b_t`,
/// starting from `h0`. Returns all `h_t` stacked as rows.
pub fn linear_recurrence<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, h0: &[F]) -> Result<Tensor<F>> {
    a.expect_same_dims(b, "linear_recurrence")?;
    let c = a.cols();
    if h0.len() != c {
        return Err(shape_err(
            "linear_recurrence",
            format!("h0 has {} != {c}", h0.len()),
        ));
    }
    let mut out = Tensor::zeros(a.dims());
    let mut h = h0.to_vec();
    for ((ar, br), or) in a
        .data()
        .chunks(c)
        .zip(b.data().chunks(c))
        .zip(out.data_mut().chunks_mut(c))
    {
        for j in 0..c {
            h[j] = ar[j] * h[j] + br[j];
        }
        or.copy_from_slice(&h);
    }
    Ok(out)
}

/// Returns `(da, db, dh0)` given the forward outputs `h`.
pub fn linear_recurrence_backward<F: Scalar>(
    a: &Tensor<F>,
    h: &Tensor<F>,
    h0: &[F],
    grad: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Vec<F>) {
    let c = a.cols();
    let t_len = a.rows();
    let mut da = Tensor::zeros(a.dims());
    let mut db = Tensor::zeros(a.dims());
    let mut carry = vec![F::zero(); c];
    for t in (0..t_len).rev() {
        let g = grad.row(t);
        for j in 0..c {
            carry[j] += g[j];
        }
        db.row_mut(t).copy_from_slice(&carry);
        let prev: &[F] = if t == 0 { h0 } else { h.row(t - 1) };
        let ar = a.row(t);
        let dar = da.row_mut(t);
        for j in 0..c {
            dar[j] = carry[j] * prev[j];
            carry[j] *= ar[j];
        }
    }
    (da, db, carry)
}

/// Causal depthwise convolution over rows.
///
/// `kernel` is `(k, n)`; row `k-1` multiplies the current input and row `0`
/// the input `k-1` steps back. `tail` supplies the `k-1` inputs preceding the
/// sequence, oldest first.
pub fn causal_conv<F: Scalar>(
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: &Tensor<F>,
    tail: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (k, c) = (kernel.rows(), x.cols());
    if kernel.cols() != c || bias.len() != c || tail.cols() != c || tail.rows() + 1 != k {
        return Err(shape_err(
            "causal_conv",
            format!(
                "x {:?}, kernel {:?}, bias {:?}, tail {:?}",
                x.dims(),
                kernel.dims(),
                bias.dims(),
                tail.dims()
            ),
        ));
    }
    let t_len = x.rows();
    let mut out = Tensor::zeros(x.dims());
    for t in 0..t_len {
        let or = out.row_mut(t);
        or.copy_from_slice(bias.data());
        for j in 0..k {
            // input index t - (k-1) + j, possibly reaching into the tail
            let src = t + j;
            let input: &[F] = if src + 1 < k {
                tail.row(src)
            } else {
                x.row(src + 1 - k)
            };
            let kr = kernel.row(j);
            for ((o, &w), &v) in or.iter_mut().zip(kr).zip(input) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

/// Returns `(dx, dkernel, dbias)`; gradients into the tail are dropped.
pub fn causal_conv_backward<F: Scalar>(
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    tail: &Tensor<F>,
    grad: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let k = kernel.rows();
    let t_len = x.rows();
    let mut dx = Tensor::zeros(x.dims());
    let mut dk = Tensor::zeros(kernel.dims());
    for t in 0..t_len {
        let g = grad.row(t).to_vec();
        for j in 0..k {
            let src = t + j;
            let kr = kernel.row(j).to_vec();
            let input: Vec<F> = if src + 1 < k {
                tail.row(src).to_vec()
            } else {
                let xr = x.row(src + 1 - k).to_vec();
                let dxr = dx.row_mut(src + 1 - k);
                for ((d, &gv), &w) in dxr.iter_mut().zip(&g).zip(&kr) {
                    *d += gv * w;
                }
                xr
            };
            for ((d, &gv), &v) in dk.row_mut(j).iter_mut().zip(&g).zip(&input) {
                *d += gv * v;
            }
        }
    }
    (dx, dk, sum_rows(grad))
}

/// Rotary position encoding with split-half channel pairing: within every head,
/// channel `i` is rotated together with channel `i + head_dim/2` by angle
/// `pos · base^(-2i/head_dim)`. Row `r` sits at position `start + r`.
pub fn rope<F: Scalar>(
    x: &Tensor<F>,
    head_dim: usize,
    start: usize,
    base: f64,
) -> Result<Tensor<F>> {
    rope_rotate(x, head_dim, start, base, false)
}

/// The inverse rotation, which is also the vector-Jacobian product.
pub fn rope_backward<F: Scalar>(
    grad: &Tensor<F>,
    head_dim: usize,
    start: usize,
    base: f64,
) -> Tensor<F> {
    rope_rotate(grad, head_dim, start, base, true).expect("checked in forward")
}

fn rope_rotate<F: Scalar>(
    x: &Tensor<F>,
    head_dim: usize,
    start: usize,
    base: f64,
    inverse: bool,
) -> Result<Tensor<F>> {
    let c = x.cols();
    if head_dim == 0 || !head_dim.is_multiple_of(2) || !c.is_multiple_of(head_dim) {
        return Err(shape_err("rope", format!("cols {c}, head_dim {head_dim}")));
    }
    let mut out = x.clone();
    let half = head_dim / 2;
    for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
        let pos = (start + r) as f64;
        for i in 0..half {
            let theta = pos * base.powf(-2.0 * i as f64 / head_dim as f64);
            let (s, co) = theta.sin_cos();
            let (s, co) = (F::of(if inverse { -s } else { s }), F::of(co));
            for head in row.chunks_mut(head_dim) {
                let (x1, x2) = (head[i], head[i + half]);
                head[i] = x1 * co - x2 * s;
                head[i + half] = x1 * s + x2 * co;
            }
        }
    }
    Ok(out)
}

pub fn gather_rows<F: Scalar>(table: &Tensor<F>, ids: &[u32]) -> Result<Tensor<F>> {
    expect_matrix(table, "gather_rows")?;
    let c = table.cols();
    let mut data = Vec::with_capacity(ids.len() * c);
    for &id in ids {
        if id as usize >= table.rows() {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: table.rows(),
            });
        }
        data.extend_from_slice(table.row(id as usize));
    }
    Tensor::from_vec(&[ids.len(), c], data)
}

pub fn gather_rows_backward<F: Scalar>(
    table_dims: &[usize],
    ids: &[u32],
    grad: &Tensor<F>,
) -> Tensor<F> {
    let mut dt = Tensor::zeros(table_dims);
    for (r, &id) in ids.iter().enumerate() {
        for (d, &g) in dt.row_mut(id as usize).iter_mut().zip(grad.row(r)) {
            *d += g;
        }
    }
    dt
}

pub fn slice_cols<F: Scalar>(x: &Tensor<F>, start: usize, len: usize) -> Result<Tensor<F>> {
    let c = x.cols();
    if start + len > c {
        return Err(shape_err("slice_cols", format!("{start}+{len} > {c}")));
    }
    let mut data = Vec::with_capacity(x.rows() * len);
    for r in x.data().chunks(c) {
        data.extend_from_slice(&r[start..start + len]);
    }
    Tensor::from_vec(&[x.rows(), len], data)
}

pub fn concat_cols<F: Scalar>(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
    let rows = parts.first().map(|p| p.rows()).unwrap_or(0);
    if parts.iter().any(|p| p.rows() != rows) {
        return Err(shape_err("concat_cols", "row counts differ"));
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::from_vec(&[rows, total], data)
}

/// Mean next-token cross-entropy: row `r` of `logits` predicts `targets[r]`.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, targets: &[u32]) -> Result<F> {
    let (rows, v) = (logits.rows(), logits.cols());
    if rows != targets.len() || rows == 0 {
        return Err(shape_err(
            "cross_entropy",
            format!("{rows} rows vs {} targets", targets.len()),
        ));
    }
    let mut total = F::zero();
    for (row, &t) in logits.data().chunks(v).zip(targets) {
        if t as usize >= v {
            return Err(Error::TokenOutOfRange { id: t, vocab: v });
        }
        total += log_sum_exp(row) - row[t as usize];
    }
    Ok(total / F::of(rows as f64))
}

pub fn cross_entropy_backward<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[u32],
    grad: F,
) -> Tensor<F> {
    let (rows, v) = (logits.rows(), logits.cols());
    let mut out = Tensor::zeros(logits.dims());
    let scale = grad / F::of(rows as f64);
    for ((row, or), &t) in logits
        .data()
        .chunks(v)
        .zip(out.data_mut().chunks_mut(v))
        .zip(targets)
    {
        let lse = log_sum_exp(row);
        for (o, &l) in or.iter_mut().zip(row) {
            *o = (l - lse).exp() * scale;
        }
        or[t as usize] -= scale;
    }
    out
}

pub fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let m = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let s = row.iter().fold(F::zero(), |s, &v| s + (v - m).exp());
    m + s.ln()
}
