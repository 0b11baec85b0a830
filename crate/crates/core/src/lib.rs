//! Cycle-consistent optimal-transport conditional flow matching for voice
//! conversion, exercised on a synthetic speech world with analytic ground truth.

pub mod arrayfile;
pub mod cli;
pub mod condnets;
pub mod cyclereg;
pub mod error;
pub mod evalkit;
pub mod flowcore;
pub mod gradcore;
pub mod pipeline;
pub mod rng;
pub mod synthworld;

pub use error::{Error, Result};
