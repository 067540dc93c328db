//! Observability-aware estimation and planning for relative motion of two
//! quadrotors from range and relative-attitude measurements.

pub mod error;
pub mod estimator;
pub mod liealg;
mod matrix_rows;
pub mod model;
pub mod noise;
pub mod obsv;
pub mod opc;
pub mod quadrature;
pub mod sim;
pub mod cli;
pub mod systems;

pub use error::{Error, Result};
