//! Online knowledge distillation with entropy-balanced forward/reverse KL.
//!
//! `bdkd-core` is `no_std` (it needs `alloc`) and holds every numerical piece of
//! the engine: a small reverse-mode tape, temperature softmax and KL
//! divergences, the distillation objectives, MLP classifiers, the co-training
//! loop, calibration metrics and the synthetic data generators. File formats,
//! experiment orchestration and the CLI live in the `bdkd` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

extern crate alloc;

pub mod calibration;
pub mod data;
pub mod divergence;
mod error;
pub mod gradcheck;
mod math;
pub mod models;
pub mod objectives;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
