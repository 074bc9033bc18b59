//! Dense tensors, primitive ops with hand-written backward passes, the
//! associative scan, and the reverse-mode tape.

pub mod ops;
pub mod scan;
pub mod tape;
pub mod tensor;

pub use ops::{sqrt_clipped_backward, Band, RMSNORM_EPS, SQRT_GRAD_CLIP};
pub use tape::{Grads, Tape, Var};
pub use tensor::{Scalar, Tensor};
