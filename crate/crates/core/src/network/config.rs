use serde::{Deserialize, Serialize};

use super::NetworkError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneVariant {
    Resnet50,
    Resnet101,
    Tiny,
}

impl BackboneVariant {
    pub fn label(&self) -> &'static str {
        match self {
            BackboneVariant::Resnet50 => "50",
            BackboneVariant::Resnet101 => "101",
            BackboneVariant::Tiny => "tiny",
        }
    }
}

/// Architecture hyperparameters. Everything that changes parameter shapes
/// lives here, so a checkpoint's config fully determines its layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub pyramid_channels: usize,
    /// Number of stacked hourglasses `T`; 0 disables the pose branch.
    pub hourglass_count: usize,
    pub hourglass_channels: usize,
    pub hourglass_depth: usize,
    pub num_keypoints: usize,
    pub num_classes: usize,
    /// Upper bound on GroupNorm groups; the actual count is the largest
    /// divisor of the channel count not above this.
    pub norm_groups: usize,
    /// Convolutions per prediction tower.
    pub tower_depth: usize,
}

pub const SUPPORTED_STACKS: [usize; 4] = [0, 1, 2, 4];

impl BackboneConfig {
    pub fn resnet50(hourglass_count: usize, num_keypoints: usize) -> Self {
        BackboneConfig {
            variant: BackboneVariant::Resnet50,
            pyramid_channels: 256,
            hourglass_count,
            hourglass_channels: 256,
            hourglass_depth: 4,
            num_keypoints,
            num_classes: 3,
            norm_groups: 32,
            tower_depth: 4,
        }
    }

    pub fn resnet101(hourglass_count: usize, num_keypoints: usize) -> Self {
        BackboneConfig { variant: BackboneVariant::Resnet101, ..Self::resnet50(hourglass_count, num_keypoints) }
    }

    /// Desk-scale variant used by tests and the synthetic corpus.
    pub fn tiny(hourglass_count: usize, num_keypoints: usize) -> Self {
        BackboneConfig {
            variant: BackboneVariant::Tiny,
            pyramid_channels: 32,
            hourglass_count,
            hourglass_channels: 64,
            hourglass_depth: 2,
            num_keypoints,
            num_classes: 3,
            norm_groups: 8,
            tower_depth: 4,
        }
    }

    pub fn for_variant(variant: BackboneVariant, hourglass_count: usize, num_keypoints: usize) -> Self {
        match variant {
            BackboneVariant::Resnet50 => Self::resnet50(hourglass_count, num_keypoints),
            BackboneVariant::Resnet101 => Self::resnet101(hourglass_count, num_keypoints),
            BackboneVariant::Tiny => Self::tiny(hourglass_count, num_keypoints),
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let fail = |m: String| Err(NetworkError::InvalidConfig(m));
        if !SUPPORTED_STACKS.contains(&self.hourglass_count) {
            return fail(format!("hourglass_count {} not in {SUPPORTED_STACKS:?}", self.hourglass_count));
        }
        if self.num_classes == 0 || self.pyramid_channels == 0 || self.norm_groups == 0 || self.tower_depth == 0 {
            return fail("num_classes, pyramid_channels, norm_groups and tower_depth must be positive".into());
        }
        if self.hourglass_count > 0 {
            if self.num_keypoints == 0 || self.hourglass_channels < 2 {
                return fail("pose branch needs num_keypoints > 0 and hourglass_channels >= 2".into());
            }
            // the hourglass halves the stride-8 map `depth` times; inputs are multiples of 128
            if !(1..=4).contains(&self.hourglass_depth) {
                return fail(format!("hourglass_depth {} not in 1..=4", self.hourglass_depth));
            }
        }
        Ok(())
    }

    pub fn has_pose_branch(&self) -> bool {
        self.hourglass_count > 0
    }
}
