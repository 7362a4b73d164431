//! Debug and qualitative images: detection overlays, target maps, heatmaps.

use image::{Rgb, RgbImage};

use crate::annotation::BoxAnnotation;
use crate::geometry::BBox;
use crate::pose::KeypointHeatmapStack;
use crate::postprocess::Detection;
use crate::targets::TargetMaps;

const PALETTE: [Rgb<u8>; 6] = [
    Rgb([230, 40, 40]),
    Rgb([40, 90, 230]),
    Rgb([30, 170, 60]),
    Rgb([230, 160, 20]),
    Rgb([160, 40, 200]),
    Rgb([20, 180, 190]),
];

pub fn class_color(class_id: usize) -> Rgb<u8> {
    PALETTE[class_id % PALETTE.len()]
}

/// Draw the outline of `b` with the given stroke width, clipped to the image.
pub fn draw_box(img: &mut RgbImage, b: &BBox, color: Rgb<u8>, stroke: u32) {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return;
    }
    let clamp_x = |v: f64| (v.floor().max(0.0) as u32).min(w - 1);
    let clamp_y = |v: f64| (v.floor().max(0.0) as u32).min(h - 1);
    let (x0, y0) = (clamp_x(b.x_min), clamp_y(b.y_min));
    let (x1, y1) = (clamp_x(b.x_max - 1.0), clamp_y(b.y_max - 1.0));
    for s in 0..stroke {
        for x in x0..=x1 {
            for y in [y0.saturating_add(s).min(y1), y1.saturating_sub(s).max(y0)] {
                img.put_pixel(x, y, color);
            }
        }
        for y in y0..=y1 {
            for x in [x0.saturating_add(s).min(x1), x1.saturating_sub(s).max(x0)] {
                img.put_pixel(x, y, color);
            }
        }
    }
}

/// Detections at or above `min_score` in class colors over the image;
/// ground truth, when given, in thin white.
pub fn overlay(img: &RgbImage, dets: &[Detection], gts: &[BoxAnnotation], min_score: f64) -> RgbImage {
    let mut out = img.clone();
    for g in gts {
        draw_box(&mut out, &g.bbox, Rgb([255, 255, 255]), 1);
    }
    for d in dets.iter().filter(|d| d.score >= min_score) {
        draw_box(&mut out, &d.bbox, class_color(d.class_id), 2);
    }
    out
}

/// One row per level: class map on the left, center-ness on the right, both
/// painted at input resolution.
pub fn target_grid(maps: &TargetMaps, input_size: (u32, u32)) -> RgbImage {
    let (w, h) = input_size;
    let mut out = RgbImage::from_pixel(2 * w + 4, (h + 4) * maps.levels.len() as u32, Rgb([255, 255, 255]));
    for (li, lt) in maps.levels.iter().enumerate() {
        let s = lt.spec.stride;
        let top = li as u32 * (h + 4);
        for row in 0..lt.height {
            for col in 0..lt.width {
                let i = row * lt.width + col;
                let cls = lt.class_map[i];
                let left = if cls < 0 { Rgb([25, 25, 25]) } else { class_color(cls as usize) };
                let v = (lt.ctr[i] * 255.0).round() as u8;
                for dy in 0..s {
                    for dx in 0..s {
                        let (x, y) = (col as u32 * s + dx, row as u32 * s + dy);
                        if x < w && y < h {
                            out.put_pixel(x, top + y, left);
                            out.put_pixel(w + 4 + x, top + y, Rgb([v, v, v]));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Channels tiled `cols` per row, each magnified by `zoom`, grayscale.
pub fn heatmap_grid(stack: &KeypointHeatmapStack, cols: usize, zoom: u32) -> RgbImage {
    let cols = cols.max(1);
    let rows = stack.channels.div_ceil(cols).max(1);
    let cw = stack.width as u32 * zoom + 2;
    let ch = stack.height as u32 * zoom + 2;
    let mut out = RgbImage::from_pixel(cw * cols as u32, ch * rows as u32, Rgb([80, 0, 0]));
    for k in 0..stack.channels {
        let (ox, oy) = ((k % cols) as u32 * cw, (k / cols) as u32 * ch);
        for row in 0..stack.height {
            for col in 0..stack.width {
                let v = (stack.at(k, row, col).clamp(0.0, 1.0) * 255.0).round() as u8;
                for dy in 0..zoom {
                    for dx in 0..zoom {
                        out.put_pixel(ox + col as u32 * zoom + dx, oy + row as u32 * zoom + dy, Rgb([v, v, v]));
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_outline_touches_corners_only_on_the_border() {
        let mut img = RgbImage::new(20, 20);
        draw_box(&mut img, &BBox::new(2.0, 3.0, 12.0, 15.0), Rgb([255, 0, 0]), 1);
        assert_eq!(*img.get_pixel(2, 3), Rgb([255, 0, 0]));
        assert_eq!(*img.get_pixel(11, 14), Rgb([255, 0, 0]));
        assert_eq!(*img.get_pixel(6, 8), Rgb([0, 0, 0]));
        assert_eq!(*img.get_pixel(12, 15), Rgb([0, 0, 0]));
    }

    #[test]
    fn heatmap_grid_dimensions() {
        let stack = KeypointHeatmapStack { channels: 5, height: 4, width: 6, sigma: 2.0, maps: vec![0.5; 120] };
        let img = heatmap_grid(&stack, 3, 2);
        assert_eq!(img.dimensions(), (3 * 14, 2 * 10));
    }
}
