//! Command-line pipeline for the vexkit speaker-verification toolkit.

pub mod config;
pub mod pipeline;
pub mod toy;
