//! Mini-batch quadratic models of a neural network's regularized loss.
//!
//! The crate builds second-order Taylor models of a small fully-connected
//! classifier on individual mini-batches and on the full training set, and
//! provides the machinery to measure how the two disagree: directional slopes
//! and curvatures, eigenspace overlaps, conjugate gradients with debiased step
//! sizes, and a Kronecker-factored Laplace posterior whose eigenvalues can be
//! re-measured on an independent batch.
//!
//! Module map:
//!
//! - [`linalg`]: dense symmetric eigensolvers, a Lanczos top-k solver,
//!   Kronecker products and the seeded random number generator.
//! - [`model`]: the MLP with exact gradients, Hessian-, GGN- and
//!   Jacobian-vector products and K-FAC factors.
//! - [`quadratic`]: curvature operators and quadratic models.
//! - [`cg`]: conjugate gradients and the two-batch debiased variant.
//! - [`laplace`]: K-FAC Laplace posterior, sampling, debiasing and the
//!   linearized predictive.
//! - [`diagnostics`]: direction scans, overlap matrices and bias summaries.
//! - [`metrics`]: accuracy, NLL, ECE, AUROC and predictive entropy.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cg;
pub mod diagnostics;
mod error;
pub mod laplace;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod quadratic;

pub use error::{Error, Result};
