//! Sparse-group-lasso supernet search.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: dense tensors and a define-by-run reverse-mode tape.
//! - [`prox`]: L1, group-L2 and sparse-group-lasso proximal maps.
//! - [`optim`]: SGD, Adam and the accelerated proximal optimizers.
//! - [`supernet`]: the mixed-edge cell, architecture weights and derivation.
//! - [`bilevel`]: hypergradients and the alternating search loop.
//! - [`tasks`]: datasets, the pruning sweep and the toy cell search.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bilevel;
pub mod error;
pub mod optim;
pub mod prox;
pub mod supernet;
pub mod tasks;

pub use error::{Error, Result};
