use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid architecture: {0}")]
pub struct ArchError(pub String);

/// Shapes of the detector. Two states built from equal descriptors have
/// identical parameter names and shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    /// Square input side in pixels.
    pub input_size: usize,
    pub input_channels: usize,
    /// Output channels of each backbone block (conv→BN→ReLU, then 2×2 pool
    /// on every block but the last).
    pub backbone_channels: Vec<usize>,
    pub rpn_channels: usize,
    pub anchor_scales: Vec<f32>,
    pub anchor_aspects: Vec<f32>,
    pub num_classes: usize,
    pub roi_pool_size: usize,
    pub roi_hidden: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        Self {
            input_size: 96,
            input_channels: 3,
            backbone_channels: vec![16, 32, 64, 64],
            rpn_channels: 64,
            anchor_scales: vec![16.0, 32.0, 64.0],
            anchor_aspects: vec![0.5, 1.0, 2.0],
            num_classes: 3,
            roi_pool_size: 5,
            roi_hidden: 256,
            bn_momentum: crate::batchnorm::DEFAULT_MOMENTUM,
            bn_eps: crate::batchnorm::DEFAULT_EPS,
        }
    }
}

impl ArchDescriptor {
    pub fn feature_stride(&self) -> usize {
        1 << self.backbone_channels.len().saturating_sub(1)
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / self.feature_stride()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_aspects.len()
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().unwrap_or(&self.input_channels)
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        if self.backbone_channels.is_empty() {
            return Err(ArchError("backbone needs at least one block".into()));
        }
        if self.input_size == 0 || self.input_size % self.feature_stride() != 0 {
            return Err(ArchError(format!(
                "feature stride {} must divide input size {}",
                self.feature_stride(),
                self.input_size
            )));
        }
        if self.anchors_per_cell() == 0 {
            return Err(ArchError("need at least one anchor per cell".into()));
        }
        if self.anchor_scales.iter().chain(&self.anchor_aspects).any(|v| !(*v > 0.0)) {
            return Err(ArchError("anchor scales and aspects must be positive".into()));
        }
        if self.num_classes == 0 || self.roi_pool_size == 0 || self.roi_hidden == 0 || self.rpn_channels == 0 {
            return Err(ArchError("class count and head sizes must be positive".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) {
            return Err(ArchError("bn momentum must be in (0,1] and eps positive".into()));
        }
        Ok(())
    }
}
