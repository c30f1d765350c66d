//! Full-reference quality assessment for super-resolved images.
//!
//! The crate builds everything from the numeric substrate up: dense tensors,
//! a reverse-mode tape, the convolution/attention/shuffle operators the model
//! needs, the two-branch network itself, and the training and evaluation
//! protocol around it. A finite-difference harness cross-checks every
//! operator gradient, and the correlation metrics used for evaluation are
//! implemented alongside.

pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod training;

pub use error::{PbanError, Result};
