use crate::error::{shape_err, Result};
use crate::numerics::{ops, Scalar, Tape, Tensor, Var};

use super::params::EmbeddingTable;

impl<F: Scalar> EmbeddingTable<Tensor<F>> {
    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn width(&self) -> usize {
        self.table.cols()
    }
}

/// Looks tokens up and multiplies by `√model_width`.
pub fn embed<F: Scalar>(tokens: &[u32], table: &EmbeddingTable<Tensor<F>>) -> Result<Tensor<F>> {
    let rows = ops::gather_rows(&table.table, tokens)?;
    let s = F::of(table.scale);
    Ok(rows.map(|v| v * s))
}

/// `hidden · tableᵀ`. The input scale is deliberately absent here.
pub fn unembed<F: Scalar>(
    hidden: &Tensor<F>,
    table: &EmbeddingTable<Tensor<F>>,
) -> Result<Tensor<F>> {
    if hidden.cols() != table.width() {
        return Err(shape_err(
            "unembed",
            format!(
                "hidden {:?} vs table {:?}",
                hidden.dims(),
                table.table.dims()
            ),
        ));
    }
    ops::matmul_nt(hidden, &table.table)
}

impl EmbeddingTable<Var> {
    pub fn embed_tape<F: Scalar>(&self, tape: &mut Tape<F>, tokens: &[u32]) -> Result<Var> {
        let rows = tape.gather(self.table, tokens)?;
        Ok(tape.affine(rows, F::of(self.scale), F::zero()))
    }

    pub fn unembed_tape<F: Scalar>(&self, tape: &mut Tape<F>, hidden: Var) -> Result<Var> {
        tape.matmul_nt(hidden, self.table)
    }
}
