//! Decoding of dense head outputs into scored, class-labelled boxes.

use std::cmp::Ordering;

use posedet_tensor::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::annotation::ClassMap;
use crate::geometry::BBox;
use crate::losses::sigmoid;
use crate::network::NetworkOutputs;
use crate::targets::{location_grid, LevelSpec, TargetError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub score_thresh: f64,
    /// Candidates kept per level before NMS.
    pub topk: usize,
    pub nms_iou: f64,
    /// Detections kept per image after NMS.
    pub max_detections: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig { score_thresh: 0.05, topk: 1000, nms_iou: 0.6, max_detections: 100 }
    }
}

/// Deterministic total order: score descending, then x_min, y_min, class,
/// x_max, y_max ascending.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.x_max.total_cmp(&b.bbox.x_max))
        .then(a.bbox.y_max.total_cmp(&b.bbox.y_max))
}

/// Head outputs of one level for a single image, channel-major.
#[derive(Clone, Copy, Debug)]
pub struct LevelView<'a> {
    pub spec: &'a LevelSpec,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// `num_classes * height * width` logits.
    pub cls_logits: &'a [f64],
    /// `height * width` logits.
    pub ctr_logits: &'a [f64],
    /// `4 * height * width` positive distances `(l, t, r, b)`.
    pub reg: &'a [f64],
}

pub fn decode_level(
    view: &LevelView<'_>,
    input_size: (u32, u32),
    score_thresh: f64,
    topk: usize,
) -> Result<Vec<Detection>, TargetError> {
    let grid = location_grid(view.spec, input_size)?;
    let plane = view.height * view.width;
    assert_eq!(grid.coords.len(), plane, "level view does not match the input size");
    let (w, h) = (input_size.0 as f64, input_size.1 as f64);
    let mut out = Vec::new();
    for loc in 0..plane {
        let ctr = sigmoid(view.ctr_logits[loc]);
        let (x, y) = grid.coords[loc];
        let side = |k: usize| view.reg[k * plane + loc];
        let bbox = BBox::new(x - side(0), y - side(1), x + side(2), y + side(3)).clip(w, h);
        if !bbox.is_proper() {
            continue;
        }
        for c in 0..view.num_classes {
            let score = sigmoid(view.cls_logits[c * plane + loc]) * ctr;
            if score > score_thresh {
                out.push(Detection { class_id: c, score, bbox });
            }
        }
    }
    out.sort_by(detection_order);
    out.truncate(topk);
    Ok(out)
}

/// Class-wise greedy suppression of boxes with IoU above `iou_thresh`.
pub fn nms(detections: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        let suppressed = kept.iter().any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Decode every level of image `index` in a batch, suppress and cap.
pub fn detect<F: Float>(
    outputs: &NetworkOutputs<Tensor<F>>,
    levels: &[LevelSpec],
    index: usize,
    input_size: (u32, u32),
    cfg: &PostprocessConfig,
) -> Result<Vec<Detection>, TargetError> {
    let mut all = Vec::new();
    for (lo, spec) in outputs.levels.iter().zip(levels) {
        let (_, c, h, w) = lo.cls_logits.dims4();
        let plane = h * w;
        let slice = |t: &Tensor<F>, ch: usize| -> Vec<f64> {
            t.data()[index * ch * plane..(index + 1) * ch * plane].iter().map(|v| v.to_f64_lossy()).collect()
        };
        let cls = slice(&lo.cls_logits, c);
        let ctr = slice(&lo.ctr_logits, 1);
        let reg = slice(&lo.reg, 4);
        let view =
            LevelView { spec, height: h, width: w, num_classes: c, cls_logits: &cls, ctr_logits: &ctr, reg: &reg };
        all.extend(decode_level(&view, input_size, cfg.score_thresh, cfg.topk)?);
    }
    let mut kept = nms(&all, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    Ok(kept)
}

/// On-disk form of one detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class: String,
    pub score: f64,
    /// `[x_min, y_min, x_max, y_max]`.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

impl DetectionRecord {
    pub fn new(image_id: &str, det: &Detection, classes: &ClassMap) -> Self {
        let b = det.bbox;
        DetectionRecord {
            image_id: image_id.to_string(),
            class: classes.name(det.class_id).to_string(),
            score: det.score,
            bbox: [b.x_min, b.y_min, b.x_max, b.y_max],
        }
    }

    pub fn detection(&self, classes: &ClassMap) -> Option<Detection> {
        let [x0, y0, x1, y1] = self.bbox;
        Some(Detection { class_id: classes.id(&self.class)?, score: self.score, bbox: BBox::new(x0, y0, x1, y1) })
    }
}
