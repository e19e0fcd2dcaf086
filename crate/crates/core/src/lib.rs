//! Reflected rough differential equations via smooth penalisation.

// Argument checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Grid sweeps read several arrays at the same node index.
#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod experiments;
pub mod noise;
pub mod penalty;
pub mod rough;
pub mod skorokhod;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
