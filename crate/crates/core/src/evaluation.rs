//! Average precision over IoU thresholds 0.50:0.05:0.95, per class and overall.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotation::{BoxAnnotation, ClassMap};
use crate::postprocess::Detection;

pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
const RECALL_POINTS: usize = 101;

/// Per-detection TP flags for one image, in the input order of `dets`.
///
/// Detections are visited by descending score (stable); each takes the
/// unmatched same-class ground truth with the highest IoU at or above
/// `iou_thresh`, lower index first on equal IoU.
pub fn match_detections(dets: &[Detection], gts: &[BoxAnnotation], iou_thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.class_id != d.class_id {
                continue;
            }
            let iou = d.bbox.iou(&g.bbox);
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            flags[i] = true;
        }
    }
    flags
}

/// Precision sampled at 101 evenly spaced recall levels from a monotone
/// precision envelope. `scored` holds `(score, is_tp)`.
pub fn interpolated_precision(scored: &[(f64, bool)], n_gt: usize) -> Vec<f64> {
    let mut samples = vec![0.0; RECALL_POINTS];
    if n_gt == 0 {
        return samples;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        tp += scored[i].1 as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    for (k, s) in samples.iter_mut().enumerate() {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            *s = precision[idx];
        }
    }
    samples
}

/// 101-point interpolated AP. Returns 0 when `n_gt` is 0.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    interpolated_precision(scored, n_gt).iter().sum::<f64>() / RECALL_POINTS as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub labels: usize,
    pub detections: usize,
    /// AP at each of the ten IoU thresholds.
    pub ap: Vec<f64>,
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
    /// Interpolated precision at recall 0, 0.01, ..., 1 for each threshold.
    pub precision: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    /// Mean over classes with at least one label, per threshold.
    pub ap: Vec<f64>,
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
    pub images: usize,
}

/// Evaluate detections against ground truth, image by image.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<BoxAnnotation>], classes: &ClassMap) -> EvalReport {
    assert_eq!(dets.len(), gts.len(), "one detection list per ground-truth image");
    let nc = classes.len();
    let mut labels = vec![0usize; nc];
    let mut det_counts = vec![0usize; nc];
    for g in gts.iter().flatten() {
        labels[g.class_id] += 1;
    }
    for d in dets.iter().flatten() {
        det_counts[d.class_id] += 1;
    }
    // scored[class][threshold] collects (score, tp) over all images
    let mut scored = vec![vec![Vec::new(); IOU_THRESHOLDS.len()]; nc];
    for (d, g) in dets.iter().zip(gts) {
        for (ti, &thr) in IOU_THRESHOLDS.iter().enumerate() {
            for (det, tp) in d.iter().zip(match_detections(d, g, thr)) {
                scored[det.class_id][ti].push((det.score, tp));
            }
        }
    }
    let class_reports: Vec<ClassReport> = (0..nc)
        .map(|c| {
            let precision: Vec<Vec<f64>> = scored[c].iter().map(|s| interpolated_precision(s, labels[c])).collect();
            let ap: Vec<f64> = precision.iter().map(|p| p.iter().sum::<f64>() / RECALL_POINTS as f64).collect();
            ClassReport {
                name: classes.name(c).to_string(),
                labels: labels[c],
                detections: det_counts[c],
                ap50: ap[0],
                ap75: ap[5],
                map: ap.iter().sum::<f64>() / ap.len() as f64,
                ap,
                precision,
            }
        })
        .collect();
    let present: Vec<&ClassReport> = class_reports.iter().filter(|c| c.labels > 0).collect();
    let mean = |f: &dyn Fn(&ClassReport) -> f64| {
        if present.is_empty() {
            0.0
        } else {
            present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64
        }
    };
    let ap: Vec<f64> = (0..IOU_THRESHOLDS.len()).map(|t| mean(&|c| c.ap[t])).collect();
    EvalReport {
        iou_thresholds: IOU_THRESHOLDS.to_vec(),
        ap50: ap[0],
        ap75: ap[5],
        map: mean(&|c| c.map),
        ap,
        classes: class_reports,
        images: gts.len(),
    }
}

fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

/// Per-class table: one column per class, rows for label counts and AP.
pub fn render_class_table(report: &EvalReport) -> String {
    let mut header = vec!["Behavior".to_string()];
    let mut rows =
        vec![vec!["Labels".to_string()], vec!["AP50".to_string()], vec!["AP75".to_string()], vec!["mAP".to_string()]];
    for c in &report.classes {
        header.push(c.name.clone());
        rows[0].push(c.labels.to_string());
        rows[1].push(pct(c.ap50));
        rows[2].push(pct(c.ap75));
        rows[3].push(pct(c.map));
    }
    header.push("all".into());
    rows[0].push(report.classes.iter().map(|c| c.labels).sum::<usize>().to_string());
    rows[1].push(pct(report.ap50));
    rows[2].push(pct(report.ap75));
    rows[3].push(pct(report.map));
    let mut all = vec![header];
    all.extend(rows);
    render_aligned(&all)
}

/// Left-aligned first column, right-aligned remaining columns, a rule under the header.
pub fn render_aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Deterministic 8:2 train/validation assignment from a SHA-256 of the id.
pub fn split_of(image_id: &str) -> Split {
    let digest = Sha256::digest(image_id.as_bytes());
    let v = u64::from_be_bytes(digest[..8].try_into().unwrap());
    if v % 10 < 8 {
        Split::Train
    } else {
        Split::Val
    }
}
