//! Dense per-level ground truth for the anchor-free heads.
//!
//! Every feature-map cell maps to an input-pixel location. A location is
//! positive for a box when it lies strictly inside the box and the largest of
//! its four side distances falls into the level's regression range; when
//! several boxes qualify the smallest one wins.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::BoxAnnotation;

/// Largest stride of the pyramid; input sides must be multiples of it.
pub const MAX_STRIDE: u32 = 128;

#[derive(Debug, Error, PartialEq)]
pub enum TargetError {
    #[error("input size {width}x{height} is not divisible by {MAX_STRIDE}")]
    IndivisibleInput { width: u32, height: u32 },
    #[error("center-ness needs positive regression targets, got ({l}, {t}, {r}, {b})")]
    NonPositiveTarget { l: f64, t: f64, r: f64, b: f64 },
}

/// One pyramid level: stride `2^level` and the half-open regression range `(lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub level: u32,
    pub stride: u32,
    pub range_lo: f64,
    pub range_hi: f64,
}

impl LevelSpec {
    pub fn in_range(&self, m: f64) -> bool {
        m > self.range_lo && m <= self.range_hi
    }
}

/// P3..P7 with ranges (0,64], (64,128], (128,256], (256,512], (512,inf).
pub fn standard_levels() -> Vec<LevelSpec> {
    scaled_levels(1.0)
}

/// Standard levels with every finite range bound multiplied by `factor`.
pub fn scaled_levels(factor: f64) -> Vec<LevelSpec> {
    let bounds = [0.0, 64.0, 128.0, 256.0, 512.0, f64::INFINITY];
    (3..=7)
        .map(|level| {
            let i = (level - 3) as usize;
            LevelSpec { level, stride: 1 << level, range_lo: bounds[i] * factor, range_hi: bounds[i + 1] * factor }
        })
        .collect()
}

pub fn check_input_size(width: u32, height: u32) -> Result<(), TargetError> {
    if width == 0 || height == 0 || width % MAX_STRIDE != 0 || height % MAX_STRIDE != 0 {
        return Err(TargetError::IndivisibleInput { width, height });
    }
    Ok(())
}

/// Input-pixel coordinates of every cell of a level, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationGrid {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<(f64, f64)>,
}

impl LocationGrid {
    pub fn at(&self, row: usize, col: usize) -> (f64, f64) {
        self.coords[row * self.width + col]
    }
}

pub fn location_grid(level: &LevelSpec, input_size: (u32, u32)) -> Result<LocationGrid, TargetError> {
    check_input_size(input_size.0, input_size.1)?;
    let s = level.stride as usize;
    let (width, height) = (input_size.0 as usize / s, input_size.1 as usize / s);
    let half = s as f64 / 2.0;
    let coords =
        (0..height).flat_map(|y| (0..width).map(move |x| (half + (x * s) as f64, half + (y * s) as f64))).collect();
    Ok(LocationGrid { height, width, coords })
}

/// Ground truth of one level. `class_map` holds -1 for background.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub spec: LevelSpec,
    pub height: usize,
    pub width: usize,
    pub class_map: Vec<i32>,
    /// `(l, t, r, b)` distances; zero at background cells.
    pub reg: Vec<[f64; 4]>,
    /// Center-ness at positive cells; zero at background cells.
    pub ctr: Vec<f64>,
}

impl LevelTargets {
    pub fn n_pos(&self) -> usize {
        self.class_map.iter().filter(|&&c| c >= 0).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps {
    pub levels: Vec<LevelTargets>,
}

impl TargetMaps {
    pub fn n_pos(&self) -> usize {
        self.levels.iter().map(LevelTargets::n_pos).sum()
    }
}

/// `sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b))`.
pub fn center_ness(l: f64, t: f64, r: f64, b: f64) -> Result<f64, TargetError> {
    if !(l > 0.0 && t > 0.0 && r > 0.0 && b > 0.0) {
        return Err(TargetError::NonPositiveTarget { l, t, r, b });
    }
    Ok(((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt())
}

pub fn assign_targets(
    boxes: &[BoxAnnotation],
    levels: &[LevelSpec],
    input_size: (u32, u32),
) -> Result<TargetMaps, TargetError> {
    let mut out = Vec::with_capacity(levels.len());
    for spec in levels {
        let grid = location_grid(spec, input_size)?;
        let cells = grid.height * grid.width;
        let mut class_map = vec![-1i32; cells];
        let mut reg = vec![[0.0; 4]; cells];
        let mut ctr = vec![0.0; cells];
        let mut owner_area = vec![f64::INFINITY; cells];
        let s = spec.stride as f64;
        let half = s / 2.0;
        for b in boxes {
            let bb = &b.bbox;
            let area = bb.area();
            // cells whose location can be strictly inside the box
            let col_lo = (((bb.x_min - half) / s).floor() as isize).max(0) as usize;
            let col_hi = ((((bb.x_max - half) / s).ceil() as isize) + 1).clamp(0, grid.width as isize) as usize;
            let row_lo = (((bb.y_min - half) / s).floor() as isize).max(0) as usize;
            let row_hi = ((((bb.y_max - half) / s).ceil() as isize) + 1).clamp(0, grid.height as isize) as usize;
            for row in row_lo..row_hi {
                for col in col_lo..col_hi {
                    let (x, y) = grid.at(row, col);
                    let d = [x - bb.x_min, y - bb.y_min, bb.x_max - x, bb.y_max - y];
                    if d.iter().any(|&v| v <= 0.0) {
                        continue;
                    }
                    let m = d.iter().copied().fold(f64::MIN, f64::max);
                    if !spec.in_range(m) {
                        continue;
                    }
                    let i = row * grid.width + col;
                    // strict comparison keeps the earlier box on equal area
                    if area < owner_area[i] {
                        owner_area[i] = area;
                        class_map[i] = b.class_id as i32;
                        reg[i] = d;
                        ctr[i] = center_ness(d[0], d[1], d[2], d[3])?;
                    }
                }
            }
        }
        out.push(LevelTargets { spec: *spec, height: grid.height, width: grid.width, class_map, reg, ctr });
    }
    Ok(TargetMaps { levels: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    #[test]
    fn grid_uses_half_stride_offset() {
        let levels = standard_levels();
        let g3 = location_grid(&levels[0], (1152, 768)).unwrap();
        assert_eq!(g3.at(0, 0), (4.0, 4.0));
        assert_eq!((g3.height, g3.width), (96, 144));
        let g7 = location_grid(&levels[4], (1152, 768)).unwrap();
        assert_eq!(g7.at(0, 1), (192.0, 64.0));
        assert_eq!((g7.height, g7.width), (6, 9));
        for g in [&g3, &g7] {
            assert!(g.coords.iter().all(|&(x, y)| (0.0..1152.0).contains(&x) && (0.0..768.0).contains(&y)));
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        assert_eq!(
            location_grid(&standard_levels()[0], (1150, 768)),
            Err(TargetError::IndivisibleInput { width: 1150, height: 768 })
        );
    }

    #[test]
    fn ranges_partition_the_positive_axis() {
        let levels = standard_levels();
        assert_eq!(levels.iter().map(|l| l.stride).collect::<Vec<_>>(), vec![8, 16, 32, 64, 128]);
        assert_eq!(levels[0].range_lo, 0.0);
        for pair in levels.windows(2) {
            assert_eq!(pair[0].range_hi, pair[1].range_lo);
        }
        assert_eq!(levels[4].range_hi, f64::INFINITY);
    }

    #[test]
    fn center_ness_examples() {
        assert_eq!(center_ness(10.0, 10.0, 10.0, 10.0).unwrap(), 1.0);
        assert!((center_ness(1.0, 2.0, 3.0, 2.0).unwrap() - 0.5773502691896257).abs() < 1e-12);
        assert_eq!(center_ness(1.0, 5.0, 1.0, 5.0).unwrap(), 1.0);
        assert!(matches!(center_ness(0.0, 1.0, 1.0, 1.0), Err(TargetError::NonPositiveTarget { .. })));
    }

    #[test]
    fn empty_scene_is_all_background() {
        let maps = assign_targets(&[], &standard_levels(), (1152, 768)).unwrap();
        assert_eq!(maps.n_pos(), 0);
        assert!(maps.levels.iter().all(|l| l.class_map.iter().all(|&c| c == -1)));
    }

    #[test]
    fn small_box_lands_on_p3_only() {
        let boxes = [BoxAnnotation { class_id: 1, bbox: BBox::new(0.0, 0.0, 48.0, 48.0) }];
        let maps = assign_targets(&boxes, &standard_levels(), (1152, 768)).unwrap();
        assert!(maps.levels[0].n_pos() > 0);
        assert!(maps.levels[1..].iter().all(|l| l.n_pos() == 0));
        assert_eq!(maps.levels[0].class_map[0], 1);
        assert_eq!(maps.levels[0].reg[0], [4.0, 4.0, 44.0, 44.0]);
    }

    #[test]
    fn large_box_lands_on_p7_only() {
        let boxes = [BoxAnnotation { class_id: 0, bbox: BBox::new(0.0, 0.0, 1024.0, 640.0) }];
        let maps = assign_targets(&boxes, &standard_levels(), (1152, 768)).unwrap();
        assert!(maps.levels[..4].iter().all(|l| l.n_pos() == 0));
        assert!(maps.levels[4].n_pos() > 0);
    }

    #[test]
    fn overlap_goes_to_the_smaller_box() {
        let boxes = [
            BoxAnnotation { class_id: 0, bbox: BBox::new(0.0, 0.0, 60.0, 60.0) },
            BoxAnnotation { class_id: 2, bbox: BBox::new(0.0, 0.0, 40.0, 40.0) },
        ];
        let maps = assign_targets(&boxes, &standard_levels(), (128, 128)).unwrap();
        // location (4, 4) lies in both
        assert_eq!(maps.levels[0].class_map[0], 2);
        assert_eq!(maps.levels[0].reg[0], [4.0, 4.0, 36.0, 36.0]);
    }
}
