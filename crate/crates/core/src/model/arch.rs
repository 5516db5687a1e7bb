use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BN_EPS, BN_MOMENTUM};

/// Architecture hyperparameters. Stored verbatim in checkpoints so a load
/// can refuse files built for a different network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_size: usize,
    pub in_channels: usize,
    /// Kernel size of branch 1 and branch 2.
    pub kernel_sizes: [usize; 2],
    /// Output channels of the four blocks (shared by both branches).
    pub channels: [usize; 4],
    pub fusam_kernel: usize,
    pub fusam_dilation: usize,
    /// Widths of the two hidden dense layers.
    pub head_widths: [usize; 2],
    /// Dropout applied before each hidden dense layer.
    pub dropout: [f64; 2],
    pub num_classes: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            in_channels: 3,
            kernel_sizes: [3, 5],
            channels: [64, 128, 256, 512],
            fusam_kernel: 3,
            fusam_dilation: 2,
            head_widths: [250, 100],
            dropout: [0.3, 0.2],
            num_classes: 30,
            bn_eps: BN_EPS,
            bn_momentum: BN_MOMENTUM,
        }
    }
}

impl ArchConfig {
    /// Scaled-down network with the same topology, used for tests,
    /// gradient checks and quick smoke runs.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            input_size: 32,
            channels: [4, 8, 12, 16],
            head_widths: [10, 5],
            num_classes,
            ..Self::default()
        }
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn with_num_classes(mut self, k: usize) -> Self {
        self.num_classes = k;
        self
    }

    /// Width of the pooled feature vector fed to the head.
    pub fn fused_width(&self) -> usize {
        2 * self.channels[3]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return bad(format!(
                "input size must be a positive multiple of 16, got {}",
                self.input_size
            ));
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return bad("need at least one input channel and two classes".into());
        }
        for k in self.kernel_sizes.iter().chain([&self.fusam_kernel]) {
            if k % 2 == 0 {
                return bad(format!("kernel sizes must be odd, got {k}"));
            }
        }
        if self.fusam_dilation == 0 {
            return bad("dilation must be positive".into());
        }
        if self.channels.iter().chain(&self.head_widths).any(|&c| c == 0) {
            return bad("layer widths must be positive".into());
        }
        if self.dropout.iter().any(|r| !(0.0..1.0).contains(r)) {
            return bad(format!("dropout rates must be in [0, 1), got {:?}", self.dropout));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return bad("batchnorm eps must be > 0 and momentum in (0, 1)".into());
        }
        Ok(())
    }
}
