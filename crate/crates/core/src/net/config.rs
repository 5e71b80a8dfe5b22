use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-branch 1x1 convolution widths of the reference (width 1) network.
/// Branch `s` ends in `512 / 4^s` channels.
pub const BASE_BRANCH_WIDTHS: [[usize; 4]; 3] = [
    [128, 256, 256, 512],
    [128, 128, 128, 128],
    [128, 64, 64, 32],
];

pub const MAX_LEVEL: usize = 2;

/// Where batch normalization sits relative to the ReLU in each conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnOrder {
    #[default]
    ConvBnRelu,
    ConvReluBn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SppNetConfig {
    pub d1: usize,
    pub d2: usize,
    /// Descriptor length plus the five geometry channels.
    pub input_channels: usize,
    /// Scales the parameter count; channel widths scale with its square root.
    pub width_multiplier: f64,
    /// Pooling levels in use, ascending, subset of `{0, 1, 2}`.
    pub pyramid_levels: Vec<usize>,
    pub fc_dim: usize,
    pub head_dim: usize,
    pub dropout_p: f64,
    pub bn_order: BnOrder,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for SppNetConfig {
    fn default() -> Self {
        SppNetConfig {
            d1: 32,
            d2: 32,
            input_channels: 133,
            width_multiplier: 1.0,
            pyramid_levels: vec![0, 1, 2],
            fc_dim: 1024,
            head_dim: 40,
            dropout_p: 0.5,
            bn_order: BnOrder::ConvBnRelu,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }
}

impl SppNetConfig {
    pub fn new(d1: usize, d2: usize, input_channels: usize) -> Self {
        SppNetConfig {
            d1,
            d2,
            input_channels,
            ..Default::default()
        }
    }

    pub fn cells(&self) -> usize {
        self.d1 * self.d2
    }

    fn channel_scale(&self) -> f64 {
        self.width_multiplier.sqrt()
    }

    fn scaled(&self, base: usize) -> usize {
        ((base as f64 * self.channel_scale()).round() as usize).max(1)
    }

    /// Output widths of the four conv layers of branch `s`.
    pub fn branch_widths(&self, s: usize) -> [usize; 4] {
        BASE_BRANCH_WIDTHS[s].map(|w| self.scaled(w))
    }

    /// Channels entering the max-pooling units of branch `s`.
    pub fn branch_output(&self, s: usize) -> usize {
        self.branch_widths(s)[3]
    }

    pub fn fc_width(&self) -> usize {
        self.scaled(self.fc_dim)
    }

    pub fn uses_level(&self, s: usize) -> bool {
        self.pyramid_levels.contains(&s)
    }

    /// Regions per side at pooling level `s`.
    pub fn regions_per_side(s: usize) -> usize {
        1 << s
    }

    /// Offset of level `s` inside the concatenated pooled vector.
    pub fn level_offset(&self, s: usize) -> usize {
        self.pyramid_levels
            .iter()
            .take_while(|&&l| l < s)
            .map(|&l| 4usize.pow(l as u32) * self.branch_output(l))
            .sum()
    }

    /// Length of the concatenated pooled feature.
    pub fn pooled_len(&self) -> usize {
        self.pyramid_levels
            .iter()
            .map(|&s| 4usize.pow(s as u32) * self.branch_output(s))
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ShapeError(m));
        if self.input_channels == 0 || self.d1 == 0 || self.d2 == 0 {
            return bad(format!(
                "grid {}x{} with {} channels",
                self.d1, self.d2, self.input_channels
            ));
        }
        if self.pyramid_levels.is_empty()
            || self.pyramid_levels.windows(2).any(|w| w[0] >= w[1])
            || self.pyramid_levels.iter().any(|&s| s > MAX_LEVEL)
        {
            return bad(format!(
                "pyramid levels {:?} must be a sorted non-empty subset of 0..=2",
                self.pyramid_levels
            ));
        }
        let top = 1usize << self.pyramid_levels.iter().max().copied().unwrap_or(0);
        if !self.d1.is_multiple_of(top) || !self.d2.is_multiple_of(top) {
            return bad(format!(
                "grid {}x{} is not divisible into {top}x{top} pooling regions",
                self.d1, self.d2
            ));
        }
        if !(self.width_multiplier > 0.0) || self.fc_dim == 0 || self.head_dim == 0 {
            return bad("width multiplier, fc and head dims must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!(
                "dropout probability {} outside [0, 1)",
                self.dropout_p
            ));
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return bad("batch-norm epsilon must be positive and momentum in [0, 1)".into());
        }
        Ok(())
    }
}
