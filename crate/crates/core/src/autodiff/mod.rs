//! Minimal reverse-mode differentiation over `f32` tensors.
//!
//! A [`Graph`] records primitives as they execute; [`Graph::backward`]
//! sweeps the record in reverse. Only the operations the model, the
//! attacks and the training loop need are provided, and shapes never
//! broadcast except for per-channel bias/location parameters.

mod gradcheck;
mod graph;
pub(crate) mod linalg;
mod ops;
pub mod special;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheck};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
