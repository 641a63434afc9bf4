//! Safe model-based reinforcement learning for mean-field control on grid-discretized
//! populations.

pub mod autodiff;
pub mod config;
pub mod ensemble;
pub mod env;
pub mod error;
pub mod grid;
pub mod nn;
pub mod planner;
pub mod protocol;
pub mod safety;
pub mod transport;

pub use error::{Error, Result};
