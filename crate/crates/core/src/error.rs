use alloc::string::String;
use core::fmt;

use crate::model::{Arm, Stratum};

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by the inference engine.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// A unit violates a dataset invariant. `index` is zero-based.
    InvalidUnit { index: usize, rule: &'static str },
    /// The dataset as a whole cannot be fitted (empty arm, no units...).
    InvalidDataset(&'static str),
    /// A parameter value is outside its domain.
    InvalidParameter { what: &'static str, value: f64 },
    /// A covariance matrix is not symmetric positive definite (or, for the
    /// probit family, leaves the region σ11 > σ12² with σ22 = 1).
    NotPositiveDefinite { cell: Option<(Stratum, Arm)> },
    /// The requested restriction is incompatible with the model family.
    UnsupportedRestriction(&'static str),
    /// A function was called with a model family it does not handle.
    UnsupportedFamily(&'static str),
    /// Augmented state disagrees with the observed data.
    InconsistentAugmentation { index: usize, rule: &'static str },
    /// Labels for a unit cannot be imputed because both components have
    /// zero density at the data point.
    DegenerateMixture { index: usize },
    /// A Gibbs sweep produced a non-finite quantity.
    NonFinite { chain: usize, iteration: usize, block: &'static str },
    /// Chain or run configuration is invalid.
    InvalidConfig(String),
    /// Too few inputs for a summary or diagnostic.
    InsufficientData(&'static str),
    /// Every replicate comparison in a predictive check was undefined.
    UndefinedDiscrepancy,
    /// Oracle grid exceeds the node budget or is malformed.
    InvalidGrid(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidUnit { index, rule } => write!(f, "unit {index}: {rule}"),
            Error::InvalidDataset(msg) => write!(f, "invalid dataset: {msg}"),
            Error::InvalidParameter { what, value } => {
                write!(f, "invalid parameter {what} = {value}")
            }
            Error::NotPositiveDefinite { cell: Some((s, z)) } => write!(
                f,
                "covariance of cell ({}, z={}) is not positive definite",
                s.short(),
                z.index()
            ),
            Error::NotPositiveDefinite { cell: None } => {
                write!(f, "covariance is not positive definite")
            }
            Error::UnsupportedRestriction(msg) => write!(f, "unsupported restriction: {msg}"),
            Error::UnsupportedFamily(msg) => write!(f, "unsupported model family: {msg}"),
            Error::InconsistentAugmentation { index, rule } => {
                write!(f, "augmented state inconsistent at unit {index}: {rule}")
            }
            Error::DegenerateMixture { index } => write!(
                f,
                "unit {index}: both stratum densities are zero, labels cannot be imputed"
            ),
            Error::NonFinite { chain, iteration, block } => write!(
                f,
                "chain {chain}: non-finite value at iteration {iteration} in block {block}"
            ),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::InsufficientData(msg) => write!(f, "insufficient data: {msg}"),
            Error::UndefinedDiscrepancy => {
                write!(f, "discrepancy undefined for every replicate")
            }
            Error::InvalidGrid(msg) => write!(f, "invalid grid: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
