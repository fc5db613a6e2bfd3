//! Speaker verification toolkit: manifests, spectrogram frontend, CNN
//! trunks, training, embedding extraction, trial generation and scoring.

pub mod frontend;
pub mod manifest;
pub mod rng;
pub mod trunk;
pub mod dedup;
pub mod embed;
pub mod metrics;
pub mod trials;
pub mod train;
