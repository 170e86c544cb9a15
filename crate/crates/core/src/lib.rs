pub mod augment;
pub mod checks;
pub mod config;
pub mod data;
pub mod dino;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
