use crate::error::Result;
use crate::numerics::{ops, Scalar, Tape, Tensor, Var};

use super::params::GatedMlp;

impl<F: Scalar> GatedMlp<Tensor<F>> {
    /// `down(gelu(gate(x)) ⊙ up(x))`
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let gate = ops::gelu(&self.gate.forward(x)?);
        let up = self.up.forward(x)?;
        self.down.forward(&ops::mul(&gate, &up)?)
    }
}

impl GatedMlp<Var> {
    pub fn forward_tape<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let g = self.gate.forward_tape(tape, x)?;
        let g = tape.gelu(g);
        let u = self.up.forward_tape(tape, x)?;
        let h = tape.mul(g, u)?;
        self.down.forward_tape(tape, h)
    }
}
