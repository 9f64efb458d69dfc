//! Numerical laboratory for mean-field Langevin particle systems with
//! singular log and Riesz interactions.
//!
//! The crate is organized bottom-up: [`kernels`] and [`grid`] provide the
//! interaction formulas and exact quadrature, [`equilibrium`] and
//! [`meanfield`] work with one-body densities, [`particles`] simulates and
//! samples N-point configurations, [`diagnostics`] evaluates functionals of
//! configurations, and [`liouville`] solves the joint N-body equation on a
//! tensor grid for N = 2, 3.

// `!(x > 0.0)` is used on purpose so that NaN is rejected along with the bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod equilibrium;
pub mod error;
pub mod grid;
pub mod kernels;
pub mod liouville;
pub mod meanfield;
pub mod particles;
pub mod quad;

pub use error::{Error, Result};
