//! Partial identification of conditional average treatment effects with
//! high-dimensional instruments.

pub mod bounds;
pub mod checks;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod naive;
pub mod nn;
pub mod nuisance;
pub mod partition;
pub mod population;
pub mod rng;

pub use error::{Error, Result};

/// Lowercase hexadecimal encoding.
pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
