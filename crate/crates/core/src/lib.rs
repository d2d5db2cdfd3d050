//! Bayesian principal stratification for two-arm studies with one-sided
//! noncompliance, with a primary outcome modelled jointly with a secondary
//! (auxiliary) outcome.
//!
//! The crate is `no_std` with `alloc`. Everything here is a pure function of
//! its inputs plus an explicit [`rng::RngStream`]; I/O, threads and the
//! command-line front end live in the `pstrat` companion crate.
//!
//! Module map:
//!
//! - [`model`]: data types, model families, restrictions, likelihoods
//! - [`samplers`]: seedable random-variate primitives
//! - [`gibbs`]: data-augmentation Gibbs sampler and multi-chain driver
//! - [`estimands`]: causal effects, posterior summaries, PSRF, KDE
//! - [`ppc`]: discrepancies and posterior predictive p-values
//! - [`simlab`]: simulation scenarios and repeated-sampling metrics
//! - [`oracle`]: brute-force grid posterior used for validation

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod error;
pub mod estimands;
pub mod exec;
pub mod gibbs;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod ppc;
pub mod rng;
pub mod samplers;
pub mod simlab;
pub mod special;

pub use error::{Error, Result};
pub use exec::{Executor, Sequential};
pub use model::{
    Arm, CellParams, Family, ModelSpec, ObservedDataset, Outcome, Priors, Restriction, Stratum,
    Sym2, Theta, Unit,
};
pub use rng::RngStream;
