//! Region-gated, layer-modulated vision transformer for detecting
//! synthetic faces, with the data, training and evaluation pipeline
//! around it.

pub mod attention;
pub mod checkpoint;
pub mod data_synth;
pub mod error;
pub mod imageio;
pub mod lamm;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod par;
pub mod training;

pub use error::{CheckpointError, Error, Result};
