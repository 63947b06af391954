//! Differentiable substrate: dense tensors, a reverse-mode tape, layers,
//! Adam, and a finite-difference gradient checker.

mod adam;
mod gradcheck;
pub mod kernels;
pub mod layers;
mod params;
mod session;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::ParamSet;
pub use session::Session;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
