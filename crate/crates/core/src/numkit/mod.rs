//! Numeric kernel: dense matrices, a reverse-mode tape, Adam, and a seeded RNG.

mod adam;
mod rng;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use rng::{derive_seed, Rng};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::{sigmoid, Elementwise, Tensor2};
