//! Retrieval-augmented monocular metric depth estimation at desk scale.
//!
//! The pipeline estimates per-pixel uncertainty of a single-stream model,
//! retrieves RGB-D context samples for the uncertain segments, matches them
//! to the input, and runs a dual-stream transformer whose input stream
//! attends only to the matched context tokens.

pub mod correspondence;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod retrieval;
pub mod rng;
pub mod segment;
pub mod uncertainty;

pub use error::{RadError, Result};
pub use image::{DepthMap, ImageBuffer};
pub use rng::SeededRng;
