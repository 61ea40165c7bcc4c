//! Target-mass grasping of granular food from heightfield patches.

pub mod config;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod nn;
pub mod patching;
pub mod rng;
pub mod selection;
pub mod sim;
pub mod tray;

pub use error::{Error, ErrorKind, Result};
