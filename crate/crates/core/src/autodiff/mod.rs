//! Dense tensors and a reverse-mode tape.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use params::ParamLayout;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
