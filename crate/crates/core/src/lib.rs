//! Distributed secondary frequency control for lossless power networks.

// NaN-rejecting parameter checks are written as `!(x > 0.0)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certify;
pub mod consensus;
pub mod device;
pub mod error;
pub mod io;
pub mod lti;
pub mod network;
pub mod numerics;
pub mod oslc;
pub mod sim;
pub mod turbine;

pub use error::{Error, Result};
