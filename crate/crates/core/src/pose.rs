//! Ground-truth keypoint heatmaps for the hourglass stages.

use serde::{Deserialize, Serialize};

use crate::annotation::{ImageSample, KeypointSet};

/// Heatmaps live on the stride-8 grid of the C3 feature map.
pub const HEATMAP_STRIDE: u32 = 8;
pub const DEFAULT_SIGMA: f64 = 2.0;

/// COCO-17 keypoint order.
pub const COCO_KEYPOINTS: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Left/right pairs swapped by a horizontal flip.
pub const COCO_FLIP_PAIRS: [(usize, usize); 8] =
    [(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)];

/// Channel permutation applied on horizontal flip for `k` keypoints.
/// Only the 17-point skeleton has known pairs; other counts map to identity.
pub fn flip_permutation(k: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..k).collect();
    if k == COCO_KEYPOINTS.len() {
        for &(a, b) in &COCO_FLIP_PAIRS {
            perm.swap(a, b);
        }
    }
    perm
}

/// `K x H x W` Gaussian targets, channel-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointHeatmapStack {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    pub maps: Vec<f64>,
}

impl KeypointHeatmapStack {
    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.maps[k * n..(k + 1) * n]
    }

    pub fn at(&self, k: usize, row: usize, col: usize) -> f64 {
        self.maps[(k * self.height + row) * self.width + col]
    }
}

/// Render one channel per keypoint type: the pixel-wise maximum over persons
/// of `exp(-d^2 / (2 sigma^2))` on the stride-8 grid, with keypoint
/// coordinates divided by the stride.
pub fn render_heatmaps(
    keypoints: &[KeypointSet],
    num_keypoints: usize,
    input_size: (u32, u32),
    sigma: f64,
) -> KeypointHeatmapStack {
    let height = (input_size.1 / HEATMAP_STRIDE) as usize;
    let width = (input_size.0 / HEATMAP_STRIDE) as usize;
    let plane = height * width;
    let mut maps = vec![0.0; num_keypoints * plane];
    let denom = 2.0 * sigma * sigma;
    let stride = HEATMAP_STRIDE as f64;
    // separable: exp(-(dx^2 + dy^2)/2s^2) = ex(dx) * ey(dy)
    let mut ex = vec![0.0; width];
    let mut ey = vec![0.0; height];
    for set in keypoints {
        for (k, p) in set.points.iter().enumerate().take(num_keypoints) {
            let Some(p) = p else { continue };
            let (cx, cy) = (p.x / stride, p.y / stride);
            for (col, e) in ex.iter_mut().enumerate() {
                *e = (-(col as f64 - cx).powi(2) / denom).exp();
            }
            for (row, e) in ey.iter_mut().enumerate() {
                *e = (-(row as f64 - cy).powi(2) / denom).exp();
            }
            let chan = &mut maps[k * plane..(k + 1) * plane];
            for (row, &vy) in ey.iter().enumerate() {
                for (col, &vx) in ex.iter().enumerate() {
                    let v = vy * vx;
                    let cell = &mut chan[row * width + col];
                    if v > *cell {
                        *cell = v;
                    }
                }
            }
        }
    }
    KeypointHeatmapStack { channels: num_keypoints, height, width, sigma, maps }
}

/// Whether a sample carries any present keypoint, i.e. whether it
/// contributes to the keypoint loss.
pub fn mask_for_missing(sample: &ImageSample) -> bool {
    has_present_keypoints(&sample.keypoints)
}

pub fn has_present_keypoints(sets: &[KeypointSet]) -> bool {
    sets.iter().any(|s| s.present_count() > 0)
}
