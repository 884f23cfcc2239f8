//! Cross-domain offline RL with limited target data.
//!
//! The pipeline scores every source transition by how target-like it is
//! (k-nearest-neighbor log-distance ratios), trains a score-conditioned
//! diffusion model to generate more target-like source data, and learns a
//! policy with an IQL backbone whose source terms are gated and weighted by
//! those scores.
//!
//! The crate is `no_std` + `alloc`. The default `std` feature only enables
//! multithreaded neighbor queries and sampling; results are identical either
//! way.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod cvae;
pub mod dataset;
pub mod diffusion;
pub mod env;
pub mod error;
pub mod iql;
pub mod knn;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
