//! Training and evaluation stack for binary classification of sparse
//! four-band light-curves with a 1D inception CNN and a Siamese network
//! trained on a batch-all triplet objective.

pub mod cli;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
