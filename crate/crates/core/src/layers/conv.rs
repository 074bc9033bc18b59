use crate::error::{shape_err, Result};
use crate::numerics::{ops, Scalar, Tape, Tensor, Var};

use super::params::ConvTail;

impl<F: Scalar> ConvTail<Tensor<F>> {
    pub fn kernel_size(&self) -> usize {
        self.kernel.rows()
    }

    /// Applies the causal conv to `x` given the previous `k-1` inputs in
    /// `state` (oldest first). Returns the output and the updated tail.
    pub fn apply(&self, x: &Tensor<F>, state: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let k = self.kernel_size();
        if state.rows() + 1 != k || state.cols() != x.cols() {
            return Err(shape_err(
                "conv_tail_apply",
                format!(
                    "state {:?} for kernel {:?}",
                    state.dims(),
                    self.kernel.dims()
                ),
            ));
        }
        let y = ops::causal_conv(x, &self.kernel, &self.bias, state)?;
        let keep = k - 1;
        let c = x.cols();
        let t = x.rows();
        let mut tail = Vec::with_capacity(keep * c);
        if t >= keep {
            tail.extend_from_slice(&x.data()[(t - keep) * c..]);
        } else {
            tail.extend_from_slice(&state.data()[t * c..]);
            tail.extend_from_slice(x.data());
        }
        Ok((y, Tensor::from_vec(&[keep, c], tail)?))
    }
}

impl ConvTail<Var> {
    pub fn forward_tape<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        tape.causal_conv(x, self.kernel, self.bias)
    }
}
