//! Simulation and optimization toolkit for UAV-assisted downlink NOMA.

// Checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod learning;
pub mod noma;
pub mod rng;
pub mod spatial;
pub mod trajectory;

pub use error::{Error, Result};

use sha2::{Digest, Sha256};

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
