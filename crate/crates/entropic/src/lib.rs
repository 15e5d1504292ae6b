//! Entropy-penalized stochastic control on discrete jump-diffusion lattices.
//!
//! The crate builds finite scenario lattices driven by signed Brownian
//! increments and multinomial jump outcomes, solves the associated
//! quadratic-exponential backward equation by dynamic programming, extracts
//! the worst-case change of measure, and optimizes consumption/terminal-wealth
//! plans against the resulting robust objective.
//!
//! Everything is generic over the floating-point scalar via [`Scalar`];
//! [`Real`] is the default concrete choice.

// Negated comparisons like `!(x > 0)` deliberately catch NaN; indexed loops
// mirror the flat slice arithmetic of the lattice layout.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bsde;
pub mod error;
pub mod lattice;
pub mod logcase;
pub mod market;
pub mod measure;
pub mod oracle;
pub mod plan;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type for front ends and tests.
pub type Real = f64;
