//! Scene ingestion, synthetic data, file formats and the command-line
//! front end for `lorabox-core`.

pub mod commands;
pub mod config;
pub mod formats;
pub mod scene;
pub mod synth;
