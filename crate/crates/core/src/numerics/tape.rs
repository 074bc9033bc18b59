//! Reverse-mode differentiation over an explicit tape of primitive ops.
//!
//! Every node stores its forward value; [`Tape::backward`] walks the nodes in
//! reverse insertion order and applies the `*_backward` functions from
//! [`super::ops`]. Single-threaded by construction.

use super::ops::{self, Band};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, F),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Gelu(Var),
    SqrtClipped {
        x: Var,
        clip: F,
    },
    MaskedSoftmax(Var),
    RmsNorm(Var, Var),
    LinearRecurrence {
        a: Var,
        b: Var,
    },
    CausalConv {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    Rope {
        x: Var,
        head_dim: usize,
        start: usize,
        base: f64,
    },
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`]. Nodes the loss does not depend on have none.
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0].take()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let y = ops::add_row(self.value(x), self.value(bias))?;
        Ok(self.push(y, Op::AddRow(x, bias)))
    }

    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let y = ops::mul_row(self.value(x), self.value(v))?;
        Ok(self.push(y, Op::MulRow(x, v)))
    }

    /// `alpha · x + beta`
    pub fn affine(&mut self, x: Var, alpha: F, beta: F) -> Var {
        let y = ops::affine(self.value(x), alpha, beta);
        self.push(y, Op::Affine(x, alpha))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let y = ops::log_sigmoid(self.value(x));
        self.push(y, Op::LogSigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = ops::exp(self.value(x));
        self.push(y, Op::Exp(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = ops::gelu(self.value(x));
        self.push(y, Op::Gelu(x))
    }

    /// Square root whose derivative is capped at `clip` on the way back.
    pub fn sqrt_clipped(&mut self, x: Var, clip: F) -> Result<Var> {
        let y = ops::sqrt(self.value(x))?;
        Ok(self.push(y, Op::SqrtClipped { x, clip }))
    }

    pub fn masked_softmax(&mut self, x: Var, band: Band) -> Result<Var> {
        let y = ops::masked_softmax(self.value(x), Some(band))?;
        Ok(self.push(y, Op::MaskedSoftmax(x)))
    }

    pub fn rmsnorm(&mut self, x: Var, scale: Var) -> Result<Var> {
        let y = ops::rmsnorm(self.value(x), self.value(scale))?;
        Ok(self.push(y, Op::RmsNorm(x, scale)))
    }

    /// `h_t = a_t ⊙ h_{t-1} + b_t` from a zero initial state.
    pub fn linear_recurrence(&mut self, a: Var, b: Var) -> Result<Var> {
        let h0 = vec![F::zero(); self.value(a).cols()];
        let y = ops::linear_recurrence(self.value(a), self.value(b), &h0)?;
        Ok(self.push(y, Op::LinearRecurrence { a, b }))
    }

    /// Causal depthwise convolution from a zero history.
    pub fn causal_conv(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let kv = self.value(kernel);
        let tail = Tensor::zeros(&[kv.rows().saturating_sub(1), kv.cols()]);
        let y = ops::causal_conv(self.value(x), kv, self.value(bias), &tail)?;
        Ok(self.push(y, Op::CausalConv { x, kernel, bias }))
    }

    pub fn rope(&mut self, x: Var, head_dim: usize, start: usize, base: f64) -> Result<Var> {
        let y = ops::rope(self.value(x), head_dim, start, base)?;
        Ok(self.push(
            y,
            Op::Rope {
                x,
                head_dim,
                start,
                base,
            },
        ))
    }

    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let y = ops::gather_rows(self.value(table), ids)?;
        Ok(self.push(
            y,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = ops::slice_cols(self.value(x), start, len)?;
        Ok(self.push(y, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat_cols(&vals)?;
        Ok(self.push(y, Op::ConcatCols(parts.to_vec())))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let y = ops::cross_entropy(self.value(logits), targets)?;
        Ok(self.push(
            Tensor::scalar(y),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.value(loss).dims()),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).dims(), F::one()));

        fn acc<F: Scalar>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g).expect("gradient dims"),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (da, db) = ops::matmul_backward(val(*a), val(*b), &g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    let (da, db) = ops::matmul_nt_backward(val(*a), val(*b), &g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let (da, db) = ops::mul_backward(val(*a), val(*b), &g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(x, bias) => {
                    acc(&mut grads, *bias, ops::sum_rows(&g));
                    acc(&mut grads, *x, g);
                }
                Op::MulRow(x, v) => {
                    let (dx, dv) = ops::mul_row_backward(val(*x), val(*v), &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *v, dv);
                }
                Op::Affine(x, alpha) => {
                    let alpha = *alpha;
                    acc(&mut grads, *x, g.map(|v| v * alpha));
                }
                Op::Sigmoid(x) => acc(&mut grads, *x, ops::sigmoid_backward(&node.value, &g)),
                Op::LogSigmoid(x) => acc(&mut grads, *x, ops::log_sigmoid_backward(val(*x), &g)),
                Op::Exp(x) => {
                    let d = g.zip_map(&node.value, "exp_backward", |g, y| g * y)?;
                    acc(&mut grads, *x, d);
                }
                Op::Gelu(x) => acc(&mut grads, *x, ops::gelu_backward(val(*x), &g)),
                Op::SqrtClipped { x, clip } => {
                    let d = ops::sqrt_clipped_backward(val(*x), &g, *clip)?;
                    acc(&mut grads, *x, d);
                }
                Op::MaskedSoftmax(x) => acc(&mut grads, *x, ops::softmax_backward(&node.value, &g)),
                Op::RmsNorm(x, scale) => {
                    let (dx, ds) = ops::rmsnorm_backward(val(*x), val(*scale), &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *scale, ds);
                }
                Op::LinearRecurrence { a, b } => {
                    let h0 = vec![F::zero(); node.value.cols()];
                    let (da, db, _) =
                        ops::linear_recurrence_backward(val(*a), &node.value, &h0, &g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::CausalConv { x, kernel, bias } => {
                    let kv = val(*kernel);
                    let tail = Tensor::zeros(&[kv.rows() - 1, kv.cols()]);
                    let (dx, dk, db) = ops::causal_conv_backward(val(*x), kv, &tail, &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *kernel, dk);
                    acc(&mut grads, *bias, db);
                }
                Op::Rope {
                    x,
                    head_dim,
                    start,
                    base,
                } => acc(
                    &mut grads,
                    *x,
                    ops::rope_backward(&g, *head_dim, *start, *base),
                ),
                Op::Gather { table, ids } => {
                    let d = ops::gather_rows_backward(val(*table).dims(), ids, &g);
                    acc(&mut grads, *table, d);
                }
                Op::SliceCols { x, start } => {
                    let xv = val(*x);
                    let (c, w) = (xv.cols(), g.cols());
                    let mut d = Tensor::zeros(xv.dims());
                    for (dr, gr) in d.data_mut().chunks_mut(c).zip(g.data().chunks(w)) {
                        dr[*start..*start + w].copy_from_slice(gr);
                    }
                    acc(&mut grads, *x, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        acc(&mut grads, p, ops::slice_cols(&g, offset, w)?);
                        offset += w;
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    let d = ops::cross_entropy_backward(val(*logits), targets, g.data()[0]);
                    acc(&mut grads, *logits, d);
                }
            }
        }
        Ok(Grads { grads })
    }
}
