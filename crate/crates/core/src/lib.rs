//! Streaming batch eigenupdates: rank-1 gradient estimation for outer-product
//! trained networks.
//!
//! The crate is `no_std` (with `alloc`). File IO, configuration and the
//! command-line front end live in the `eigenstream` crate.
//!
//! Modules, bottom-up:
//!
//! - [`linalg`]: dense vectors/matrices and an exact one-sided Jacobi SVD.
//! - [`mnist`]: IDX parsing and seeded batch iteration.
//! - [`network`]: a bias-free MLP producing per-layer `(activation, error)` pairs.
//! - [`eigenupdate`]: the streaming estimator of the dominant singular triplet.
//! - [`optimizers`]: SGD, mini-batch, truncated-SVD and streaming strategies.
//! - [`diagnostics`]: spectra, convergence traces, training runs, LR search.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod diagnostics;
pub mod eigenupdate;
pub mod error;
pub mod linalg;
pub mod mnist;
pub mod network;
pub mod optimizers;
pub mod seed;

pub use error::{Error, Result};
