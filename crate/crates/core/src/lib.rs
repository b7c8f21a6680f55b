//! Deformable window cross-attention registration network.

pub mod attention;
pub mod complexity;
pub mod error;
pub mod network;
pub mod nn;
pub mod pipeline;
pub mod registration;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Bindings, Gradients, ParameterStore, Tape, Tensor, Var};
