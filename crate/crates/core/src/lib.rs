// SPDX-License-Identifier: Apache-2.0

//! Gaussian moment propagation for SDEs: assumed-density moment ODEs,
//! Euler–Maruyama ensembles, GP vector-field models and reference solutions.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adf;
pub mod emsim;
pub mod error;
pub mod fpkgrid;
pub mod gpfield;
pub mod kernels;
pub mod linalg;
pub mod odeint;
pub mod oracle;
pub mod par;
pub mod sdemodel;

pub use error::{Error, Result};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
