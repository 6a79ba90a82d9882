//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Operations are recorded on a [`Tape`] in execution order, so the node
//! list is always topologically sorted. [`Tape::backward`] walks it once in
//! reverse, accumulating gradients additively wherever a value fans out.
//!
//! Only the operations needed by the encoders, the shared classifier head
//! and the losses are provided. Every forward op rejects non-finite results.

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
