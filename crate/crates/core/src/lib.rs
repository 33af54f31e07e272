//! Multi-domain slot filling with Bi-LSTM taggers, domain-adversarial
//! training and frozen-encoder joint ensembles.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{RngState, Tensor};
