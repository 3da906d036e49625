//! Encoder/decoder Transformer with absolute or relative sinusoidal positions,
//! built on a small reverse-mode autodiff tape.

pub mod attention;
pub mod checkpoint;
pub mod compare;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod position;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Gradients, Graph, Tensor, Var};
