//! Matching-success-rate prediction for ride-hailing passenger/driver pairs.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every numerical piece:
//! a reverse-mode autodiff tape, the DNC context encoder, the multi-view
//! interaction model, cross-city memory distillation, the synthetic city
//! generator, and the training loop with its metrics.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod datagen;
pub mod dnc;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod kd;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Activation, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
