//! Dense quasi-Newton solvers built around the BFGS operator: classic BFGS,
//! Greedy-BFGS and Sharpened-BFGS (quadratic, general and randomized), with
//! runtime certification of their convergence inequalities.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod kernel;
pub mod linalg;
pub mod objectives;
pub mod solvers;
pub mod analysis;
pub mod cli;
pub mod io;

pub use error::{Error, Result};
