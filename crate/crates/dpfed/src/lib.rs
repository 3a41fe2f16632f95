//! File formats, run directories and the command line for the
//! `dpfed-core` training simulator.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codec;
pub mod compare;
pub mod config;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod run;
pub mod table;

pub use error::{DpfedError, Result};
