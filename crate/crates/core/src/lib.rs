//! Real-time adversarial domain adaptation for semantic segmentation.
//!
//! The crate bundles everything needed to train and assess a two-path
//! segmentation network whose output maps are aligned across domains by a
//! lightweight fully convolutional discriminator:
//!
//! - [`autodiff`]: a small deterministic tape-based reverse-mode engine,
//! - [`nn`]: parameter stores, layers and the model graph,
//! - [`models`]: the three discriminators, the reduced two-path network and
//!   the analytical parameter/FLOP model,
//! - [`objectives`] and [`optim`]: losses, SGD/Adam and the poly schedule,
//! - [`data`]: a synthetic two-domain segmentation benchmark,
//! - [`metrics`]: confusion matrices and IoU,
//! - [`train`]: the alternating adversarial loop, checkpoints and evaluation.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod real;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, ParamKey, Reduction, Tape, Var};
pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
