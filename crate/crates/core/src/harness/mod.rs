//! Datasets, synthetic scenes, staged training, inference and benchmarking.

pub mod bench;
pub mod colormap;
pub mod dataset;
pub mod experiment;
pub mod io;
pub mod pipeline;
pub mod synth;
pub mod train;
