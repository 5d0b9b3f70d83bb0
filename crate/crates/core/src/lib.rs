//! Split (head/tail) image classification with a learned entropy
//! bottleneck, real range-coded bitstreams, input interference
//! (corruptions and PGD-family attacks) and an object-aware
//! total-variation denoising defense.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: a small reverse-mode engine over `f32` tensors.
//! * [`model`]: head, tail and the two entropy models.
//! * [`coder`]: CDF tables, the range coder and the bitstream format.
//! * [`train`]: rate/task loss, optimizers and the training loop.
//! * [`perturb`]: corruptions, PGD attacks and the adaptive variants.
//! * [`defense`]: total variation and (masked) TV denoising.
//! * [`pipeline`]: datasets, split inference, experiment grids, maps.

pub mod autodiff;
pub mod coder;
pub mod defense;
mod error;
pub mod model;
pub mod perturb;
pub mod pipeline;
pub mod train;

pub use autodiff::{Graph, Tensor, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, PriorKind, QuantizedLatent, SplitModel};

