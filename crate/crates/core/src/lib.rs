//! Bayesian double generalized linear Tweedie models.
//!
//! The crate covers the compound Poisson-gamma (CP-g) member of the Tweedie
//! family (1 < ξ < 2) with log links for both the mean and the dispersion,
//! an optional Matérn Gaussian-process spatial effect in the mean model, and
//! a continuous spike-and-slab prior for variable selection. The four model
//! variants are:
//!
//! | id | structure                                   |
//! |----|---------------------------------------------|
//! | M1 | DGLM                                        |
//! | M2 | DGLM + variable selection                   |
//! | M3 | DGLM + spatial effect                       |
//! | M4 | DGLM + spatial effect + variable selection  |
//!
//! Posterior sampling combines preconditioned MALA block updates, random-walk
//! Metropolis-Hastings and Gibbs steps ([`samplers::run_chain`]). Selection is
//! done post hoc with a local-FDR rule ([`selection::fdr_select`]).
//!
//! The crate is `no_std` and only needs `alloc`. File formats and the command
//! line front-end live in the companion `tweedie-dglm-cli` crate.

#![no_std]
#![warn(missing_debug_implementations)]
// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod diagnostics;
mod error;
pub mod linalg;
pub mod model;
pub mod samplers;
pub mod selection;
pub mod spatial;
pub mod special;
pub mod synth;
pub mod tweedie;

pub use error::{Error, Result};
pub use model::{Hyperparameters, ModelId, ModelState, ObservationSet};
pub use samplers::{run_chain, ChainOutput, McmcConfig};
pub use spatial::SpatialDomain;
pub use tweedie::{DensityMethod, TweedieIndex, TweedieParams};
