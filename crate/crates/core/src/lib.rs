//! Cascaded filter-level pruning with weight-shared teaching assistants.
//!
//! A hierarchy of models shares one set of convolution weights. Each model has its own
//! binary filter mask, batch-norm state and classifier head. Every model's filter scores
//! are trained from the gradients of the next larger model, and each model distills from
//! the one above it.

pub mod arch;
pub mod autodiff;
pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod hierarchy;
pub mod kernels;
pub mod mask;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
