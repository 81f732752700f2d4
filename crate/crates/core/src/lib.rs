//! Deterministic multi-station materials-testing controller core.

pub mod acquisition;
pub mod config;
pub mod control;
pub mod engine;
pub mod iodrivers;
pub mod plant;
pub mod rng;
pub mod waveform;
