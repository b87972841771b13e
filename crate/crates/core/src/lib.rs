pub mod dataset;
pub mod decoding;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod midi;
pub mod network;
pub mod notes;
pub mod spectral;
pub mod synth;
pub mod training;
pub mod wav;

pub use error::{AmtError, Result};
