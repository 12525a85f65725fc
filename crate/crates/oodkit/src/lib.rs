//! File formats, dataset loading, ensemble storage and the command-line
//! front end for `oodkit-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod formats;

pub use error::{Error, Result};
