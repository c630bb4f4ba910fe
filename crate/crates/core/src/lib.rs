//! Training engine for binarized neural networks driven by flip-based
//! optimizers.

pub mod binarize;
pub mod error;
pub mod graph;
pub mod harness;
mod ops;
pub mod optimizers;
pub mod oracle;
pub mod schedulers;
pub mod telemetry;
pub mod tensor;
pub mod xnor;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use graph::{grad_check, Graph};
pub use ops::normalize;
