//! Command-line front end for `pstrat-core`: CSV ingestion, run
//! configuration, output tables and the subcommands behind the `pstrat`
//! binary.

use std::fmt;

pub mod commands;
pub mod config;
pub mod csv_io;
pub mod exec;
pub mod report;

/// Bad input from the user: a malformed file, a missing flag, an unknown
/// name. Maps to exit code 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

/// Exit code for a failed command: 1 for invalid input or configuration,
/// 2 for failures during computation.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use pstrat_core::Error as E;
    for cause in err.chain() {
        if cause.is::<InputError>() {
            return EXIT_INPUT;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidUnit { .. }
                | E::InvalidDataset(_)
                | E::InvalidConfig(_)
                | E::UnsupportedRestriction(_)
                | E::UnsupportedFamily(_)
                | E::InvalidGrid(_) => EXIT_INPUT,
                _ => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}
