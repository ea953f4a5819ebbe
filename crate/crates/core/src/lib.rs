//! Simulation and analysis of fast physical ion swapping in a segmented Paul
//! trap.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod filter;
pub mod numerics;
pub mod optimize;
pub mod qubit;
pub mod ramsey;
pub mod rng;
pub mod sequence;
pub mod thermometry;
pub mod tomography;
pub mod trap;
pub mod units;
pub mod waveform;

pub use error::{Error, Result};
