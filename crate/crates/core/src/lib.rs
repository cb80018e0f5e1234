//! Hypernetwork-based test-time domain adaptation on a small reverse-mode
//! autodiff engine, with a synthetic multi-domain benchmark and an
//! experiment harness.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod hyda;
pub mod losses;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
