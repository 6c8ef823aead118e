//! Numerical laboratory for conservative Ginzburg–Landau diffusions with
//! Kawasaki dynamics: single-site free energies, lattice operators and dual
//! norms, SDE ensembles with exact mass conservation, hydrodynamic solvers,
//! large-deviation rate functions, effective coefficients and Monte Carlo
//! deviation estimates.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod functionals;
pub mod homogenize;
pub mod hydro;
pub mod lattice;
pub mod ldplab;
pub mod linalg;
pub mod potential;
pub mod quad;

pub use error::{Error, Result};
