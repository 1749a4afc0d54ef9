//! Single-ended quality estimation for time-scale-modified audio: audio
//! ingest, feature extraction, the CNN and recurrent estimators, training,
//! model selection and method-comparison statistics.

pub mod audio;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod metrics;
pub mod models;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
