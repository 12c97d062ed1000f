//! Simulation and analysis toolkit for distributed fixed-point iteration with
//! compressed communication and period skipping.

pub mod analysis;
pub mod cli;
pub mod compression;
pub mod config;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod network;
pub mod operators;
pub mod oracle;
pub mod report;
pub mod rng;
pub mod scheduling;

pub use error::{Error, Result};
