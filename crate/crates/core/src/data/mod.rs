//! Samples on disk, target derivation, augmentation, fixtures and rendering.

pub mod augment;
pub mod dataset;
pub mod gt;
pub mod palette;
pub mod synth;

pub use dataset::{load_sample, read_split, write_sample, RgbtSample, SplitEntry, SplitTag};
