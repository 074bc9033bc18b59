use crate::error::{shape_err, Result};
use crate::numerics::{ops, Scalar, Tape, Tensor, Var};

use super::params::Linear;

impl<F: Scalar> Linear<Tensor<F>> {
    pub fn in_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.cols() != self.in_features() {
            return Err(shape_err(
                "linear",
                format!("input {:?} into weight {:?}", x.dims(), self.weight.dims()),
            ));
        }
        let (m, k, n) = (x.rows(), self.in_features(), self.out_features());
        let mut out = match &self.bias {
            Some(b) => {
                let mut data = Vec::with_capacity(m * n);
                for _ in 0..m {
                    data.extend_from_slice(b.data());
                }
                Tensor::from_vec(&[m, n], data)?
            }
            None => Tensor::zeros(&[m, n]),
        };
        ops::gemm_acc(x.data(), self.weight.data(), out.data_mut(), m, k, n);
        Ok(out)
    }
}

impl Linear<Var> {
    pub fn forward_tape<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => tape.add_row(y, b),
            None => Ok(y),
        }
    }
}
