//! Discrete-event SSD simulator with pluggable flash translation layers.

pub mod alloc;
pub mod config;
pub mod device;
pub mod engine;
pub mod error;
pub mod ftl;
pub mod geometry;
pub mod learned;
pub mod mapping;
pub mod nand;
pub mod report;
pub mod sweep;
pub mod workload;

pub use error::{Result, SimError};
