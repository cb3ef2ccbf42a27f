//! Trajectory forecasting from top-view occupancy rasters.
//!
//! The pipeline reads HighD-style tracks (or generates synthetic ones),
//! rasterizes a region around each target vehicle, slices tracks into
//! history/future windows, encodes the history with a grid of shared
//! convolutional patch encoders, pools the resulting social tensor, and
//! decodes per-step bivariate Gaussians with an LSTM.

pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod ingest;
pub mod model;
pub mod nn;
pub mod raster;
pub mod social;
pub mod synth;
pub mod train;
pub mod window;

pub use error::{Error, ErrorKind, Result};
