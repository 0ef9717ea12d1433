//! Invariant-equivariant variational autoencoder on a small reverse-mode
//! tensor engine.
//!
//! The model pairs a deterministic class latent, averaged over same-class
//! examples, with a stochastic style latent. Training is supervised or
//! semi-supervised; evaluation uses distances to per-class latent means.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorError, Var};
