//! File formats, experiment orchestration and the command-line front end for
//! [`bdkd_core`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod io;

pub use error::{CliError, CliResult};
