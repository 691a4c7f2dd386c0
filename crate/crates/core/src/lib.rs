//! Desk-scale RGB-T semantic segmentation.
//!
//! A two-stream encoder with shared weights extracts five levels of RGB and
//! thermal features. The deepest level is fused by a co-attention location
//! module, the middle levels by spatial/channel attention activation modules
//! and the shallowest level by an edge module built from multi-head dilated
//! convolutions. A five-block decoder turns the fused features into the
//! segmentation, with auxiliary location, edge and intermediate semantic
//! heads supervised during training.

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
