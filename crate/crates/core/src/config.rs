use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of encoder levels; level `i` (1-based) runs at stride `2^i`.
pub const LEVELS: usize = 5;

/// Input height and width must be multiples of the deepest stride.
pub const INPUT_MULTIPLE: usize = 32;

/// Which fusion modules are active. A disabled module is replaced by a 1×1
/// convolution over the elementwise sum of the two streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_clm: bool,
    pub use_cam: bool,
    pub use_esm: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::full()
    }
}

impl Ablation {
    pub const fn full() -> Self {
        Ablation {
            use_clm: true,
            use_cam: true,
            use_esm: true,
        }
    }

    /// Summation fusion at every level.
    pub const fn baseline() -> Self {
        Ablation {
            use_clm: false,
            use_cam: false,
            use_esm: false,
        }
    }

    /// Variants numbered as in the module ablation study: 1 is the summation
    /// baseline, 2–4 add one module (ESM, CAM, CLM), 5–7 add two
    /// (CAM+CLM, ESM+CLM, ESM+CAM) and 8 is the full network.
    pub fn from_study_row(row: usize) -> Option<Self> {
        let (esm, cam, clm) = match row {
            1 => (false, false, false),
            2 => (true, false, false),
            3 => (false, true, false),
            4 => (false, false, true),
            5 => (false, true, true),
            6 => (true, false, true),
            7 => (true, true, false),
            8 => (true, true, true),
            _ => return None,
        };
        Some(Ablation {
            use_clm: clm,
            use_cam: cam,
            use_esm: esm,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_classes: usize,
    /// Encoder output widths per level.
    pub raw_channels: [usize; LEVELS],
    /// Widths after the shared projection convolutions.
    pub channels: [usize; LEVELS],
    pub strides: [usize; LEVELS],
    /// One dilated 3×3 head per rate in the edge module.
    pub esm_dilations: Vec<usize>,
    pub dropout: f64,
    pub ablation: Ablation,
    /// Weight of the location term in the total loss.
    pub lambda_loc: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let channels = [64, 128, 256, 256, 512];
        NetworkConfig {
            num_classes: 9,
            raw_channels: channels,
            channels,
            strides: [2, 4, 8, 16, 32],
            esm_dilations: vec![1, 2, 4, 8],
            dropout: 0.1,
            ablation: Ablation::full(),
            lambda_loc: 0.5,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Narrow channel schedule that trains in seconds on a CPU.
    pub fn desk() -> Self {
        let channels = [8, 16, 16, 16, 32];
        NetworkConfig {
            raw_channels: channels,
            channels,
            ..NetworkConfig::default()
        }
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    /// Width of level `level` (1-based) after projection.
    pub fn width(&self, level: usize) -> usize {
        self.channels[level - 1]
    }

    pub fn raw_width(&self, level: usize) -> usize {
        self.raw_channels[level - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes < 2 || self.num_classes > 256 {
            return bad(format!("num_classes {} outside [2, 256]", self.num_classes));
        }
        if self.channels.iter().chain(&self.raw_channels).any(|&c| c == 0) {
            return bad("channel widths must be positive".into());
        }
        let expected: Vec<usize> = (1..=LEVELS).map(|i| 1 << i).collect();
        if self.strides[..] != expected[..] {
            return bad(format!("strides {:?} must be {expected:?}", self.strides));
        }
        if self.esm_dilations.is_empty() || self.esm_dilations.contains(&0) {
            return bad("esm_dilations must be a non-empty list of positive rates".into());
        }
        if self.channels[0] % self.esm_dilations.len() != 0 {
            return bad(format!(
                "level-1 width {} is not divisible by {} dilated heads",
                self.channels[0],
                self.esm_dilations.len()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !self.lambda_loc.is_finite() || self.lambda_loc < 0.0 {
            return bad(format!("lambda_loc {} must be finite and non-negative", self.lambda_loc));
        }
        Ok(())
    }

    pub fn check_input_size(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 || height % INPUT_MULTIPLE != 0 || width % INPUT_MULTIPLE != 0 {
            return Err(Error::invalid(
                "input",
                format!("height {height} and width {width} must be positive multiples of {INPUT_MULTIPLE}"),
            ));
        }
        Ok(())
    }
}
