//! Numerical core for out-of-distribution detection around a small multi-exit
//! convolutional classifier.
//!
//! Everything in this crate is pure computation on in-memory buffers and only
//! needs `alloc`. File formats, dataset loading, threading and the command-line
//! front end live in the `oodkit` crate.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![no_std]
#![deny(rust_2018_idioms)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod graph;
pub mod idx;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use model::{ExitLogits, ModelConfig, MultiExitModel, NUM_EXITS};
pub use tensor::Tensor;
