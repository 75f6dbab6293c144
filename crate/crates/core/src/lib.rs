//! Minimum-variance duality between nonlinear filtering and BSDE-constrained
//! optimal control for finite-state hidden Markov models, with the
//! linear-Gaussian special cases.

// `!(x >= tol)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bsde;
pub mod deterministic;
pub mod error;
pub mod expm;
pub mod filters;
pub mod grid;
pub mod hmm;
pub mod io;
pub mod lq;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use hmm::FiniteModel;
