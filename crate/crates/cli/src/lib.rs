//! Manifest-driven experiment runner on top of `ergolab-core`.
//!
//! A TOML manifest names a model document, a discretization, ladders, a
//! seed and an output directory. Running it writes JSON and CSV results,
//! each stamped with the manifest hash and seed, plus a run record listing
//! the declared checks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod io;
pub mod manifest;
pub mod model_doc;
pub mod report;
pub mod run;

pub use error::CliError;
pub use manifest::{Kind, LoadedManifest, Manifest};
pub use model_doc::ModelDoc;
pub use run::{execute, RunOptions, RunRecord};

/// Exit status when every declared check passed.
pub const EXIT_OK: i32 = 0;
/// Exit status for operational errors.
pub const EXIT_ERROR: i32 = 1;
/// Exit status when a declared check failed.
pub const EXIT_CHECK_FAILED: i32 = 2;
