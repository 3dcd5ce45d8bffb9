//! Dense `f64` tensors, a reverse-mode tape, finite-difference checking and
//! the optimizer shared by every trainable component.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use optim::AdamW;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cosine, dot, norm, Tensor};

#[cfg(test)]
pub(crate) use tape::gelu;
pub(crate) use tensor::softmax_in_place;
