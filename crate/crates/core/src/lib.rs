//! Core of a three-stage pipeline that hardens small quantized classifiers
//! against adversarial inputs and memory bit flips.
//!
//! The crate is `no_std` with `alloc`. File formats, the CLI and parallel
//! drivers live in the companion `resq` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]
// `!(x > 0.0)` style checks deliberately reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod attack;
pub mod autodiff;
pub mod bpfc;
pub mod criticality;
pub mod data;
pub mod error;
pub mod fault;
pub mod model;
pub mod quant;
pub mod rng;
pub mod search;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
