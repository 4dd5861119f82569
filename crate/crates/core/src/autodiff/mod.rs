//! Dense tensors with reverse-mode differentiation over the op set the
//! denoiser needs, plus the Adam optimizer.

mod adam;
pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, NanPolicy};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests;
