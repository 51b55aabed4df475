pub mod aligner;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod demo;
pub mod encoder;
pub mod evaluation;
pub mod error;
pub mod nn;
pub mod objectives;
pub mod signal;
pub mod trainer;
pub mod vocoder;

pub use error::{Error, Result};
