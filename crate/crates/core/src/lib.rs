pub mod checkpoint;
pub mod dataset;
pub mod distortion;
mod error;
pub mod eval;
pub mod losses;
pub mod media;
pub mod network;
pub mod nn;
pub mod similarity;
pub mod synth;
#[cfg(test)]
mod test_util;
pub mod training;

pub use error::{Error, Result};
