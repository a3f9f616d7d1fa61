//! Poverty mapping from survey ground truth and open geodata.

pub mod eval;
pub mod features;
pub mod gbrt;
pub mod geo;
pub mod groundtruth;
pub mod ingest;
pub mod mapgen;
pub mod pipeline;
pub mod synth;
