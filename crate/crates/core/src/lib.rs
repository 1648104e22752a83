//! Numerical laboratory for ergodic control of dissipative SDEs and SPDEs
//! with degenerate additive noise.
//!
//! The pipeline runs forward simulation of spectrally truncated models,
//! control randomization, penalized and constrained BSDE solves by
//! regression, vanishing-discount and long-time extraction of the ergodic
//! constant, and a 1-D HJB oracle used as ground truth.
//!
//! The crate is `no_std` with `alloc` when the default `std` feature is off.
//! The `parallel` feature spreads path work over a rayon pool; results are
//! bitwise identical for any number of workers.
#![cfg_attr(not(feature = "std"), no_std)]
// NaN-rejecting guards are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

extern crate alloc;

pub mod basis;
pub mod bsde;
pub mod channel;
pub mod ergodic;
pub mod error;
pub mod linalg;
pub mod math;
pub mod model;
pub mod oracle;
mod par;
pub mod quadrature;
pub mod randomization;
pub mod rng;
pub mod state_sim;

pub use error::{Error, Result};
