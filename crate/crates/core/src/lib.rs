pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod naturalness;
pub mod pairing;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
