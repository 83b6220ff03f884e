//! Sparse multi-head ensembles with dynamic sparse training.
//!
//! A block-sequential network is split into a shared backbone and several
//! independently initialized heads. Every maskable weight lives in a
//! [`tensor::MaskedTensor`], and the active set of each layer evolves during
//! training through prune/grow topology updates.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sparsity;
pub mod tensor;
pub mod topology;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{MaskedTensor, Tensor};
