//! Core algorithms for user-level differentially private federated training.
//!
//! This crate is `no_std` (with `alloc`). It contains everything that is a
//! pure function of its inputs: layered parameter vectors and clipping,
//! the bounded-sensitivity average estimators, the moments accountant for
//! the sampled Gaussian mechanism, the toy next-token models, and the
//! DP-FedAvg / DP-FedSGD round loop. File formats, parallel execution and
//! the command line live in the `dpfed` crate.
#![no_std]
// NaN-rejecting `!(x > 0.0)` checks are intentional.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod accountant;
pub mod error;
pub mod estimators;
pub mod fedtrain;
pub mod model;
pub mod paramvec;
pub mod rng;

pub use error::{Error, Result};
pub use paramvec::{ClipConfig, Layer, ParamVector, Shape};
