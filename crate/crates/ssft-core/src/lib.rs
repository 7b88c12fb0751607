//! Spectral-spatial fusion transformer for hyperspectral image
//! classification: tensors, reverse-mode autodiff, the dual-branch model,
//! data synthesis and augmentation, and the training recipe.

pub mod augment;
pub mod checkpoint;
pub mod cube;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{BnState, Graph, Mode, VarId};
pub use model::{SsftConfig, SsftParams};
pub use tensor::Tensor;
