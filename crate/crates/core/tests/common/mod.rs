//! Independent reference implementations and fixtures shared by the
//! integration suites. Nothing here calls the routine it checks.
#![allow(dead_code)]

use posedet::annotation::{BoxAnnotation, Keypoint, KeypointSet};
use posedet::losses::{composite_loss, LossConfig, SampleTargets};
use posedet::network::{BackboneConfig, Network};
use posedet::pose::{render_heatmaps, KeypointHeatmapStack};
use posedet::postprocess::Detection;
use posedet::targets::{assign_targets, scaled_levels, LevelSpec, TargetMaps};
use posedet::trainer::loss_and_gradients;
use posedet::BBox;
use posedet_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- geometry

pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let area = |x: &BBox| (x.x_max - x.x_min) * (x.y_max - x.y_min);
    inter / (area(a) + area(b) - inter)
}

/// Box with corners on a `quantum` lattice inside `w x h`, at least 2 px on each side.
pub fn random_box(r: &mut ChaCha8Rng, w: f64, h: f64, quantum: f64) -> BBox {
    let min_cells = (2.0 / quantum).ceil() as i64;
    let mut axis = |extent: f64| {
        let n = (extent / quantum).floor() as i64;
        let a = r.random_range(0..=n - min_cells);
        let b = r.random_range(a + min_cells..=n);
        (a as f64 * quantum, b as f64 * quantum)
    };
    let (x0, x1) = axis(w);
    let (y0, y1) = axis(h);
    BBox::new(x0, y0, x1, y1)
}

pub fn random_scene(r: &mut ChaCha8Rng, max_boxes: usize, w: f64, h: f64, classes: usize) -> Vec<BoxAnnotation> {
    let n = r.random_range(0..=max_boxes);
    (0..n).map(|_| BoxAnnotation { class_id: r.random_range(0..classes), bbox: random_box(r, w, h, 1.0) }).collect()
}

// ---------------------------------------------------------------- center-ness

/// Center-ness written out branch by branch.
pub fn center_ness_ref(l: f64, t: f64, r: f64, b: f64) -> f64 {
    let horizontal = if l < r { l / r } else { r / l };
    let vertical = if t < b { t / b } else { b / t };
    (horizontal * vertical).sqrt()
}

// ---------------------------------------------------------------- targets

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleCell {
    pub class: i32,
    pub reg: [f64; 4],
    pub ctr: f64,
}

/// Per-location brute force: every location tests every box.
pub fn oracle_targets(boxes: &[BoxAnnotation], levels: &[LevelSpec], size: (u32, u32)) -> Vec<Vec<OracleCell>> {
    let mut out = Vec::new();
    for lv in levels {
        let s = lv.stride as f64;
        let (gw, gh) = (size.0 / lv.stride, size.1 / lv.stride);
        let mut cells = Vec::new();
        for row in 0..gh {
            for col in 0..gw {
                let (px, py) = (s / 2.0 + col as f64 * s, s / 2.0 + row as f64 * s);
                let mut best: Option<(f64, usize)> = None;
                for (i, b) in boxes.iter().enumerate() {
                    let d = [px - b.bbox.x_min, py - b.bbox.y_min, b.bbox.x_max - px, b.bbox.y_max - py];
                    if d.iter().any(|&v| v <= 0.0) {
                        continue;
                    }
                    let m = d.iter().cloned().fold(f64::MIN, f64::max);
                    if !(m > lv.range_lo && m <= lv.range_hi) {
                        continue;
                    }
                    let area = (b.bbox.x_max - b.bbox.x_min) * (b.bbox.y_max - b.bbox.y_min);
                    let better = match best {
                        None => true,
                        Some((a, j)) => area < a || (area == a && i < j),
                    };
                    if better {
                        best = Some((area, i));
                    }
                }
                cells.push(match best {
                    None => OracleCell { class: -1, reg: [0.0; 4], ctr: 0.0 },
                    Some((_, i)) => {
                        let b = boxes[i].bbox;
                        let reg = [px - b.x_min, py - b.y_min, b.x_max - px, b.y_max - py];
                        OracleCell {
                            class: boxes[i].class_id as i32,
                            reg,
                            ctr: center_ness_ref(reg[0], reg[1], reg[2], reg[3]),
                        }
                    }
                });
            }
        }
        out.push(cells);
    }
    out
}

/// First disagreement between `assign_targets` output and the oracle.
pub fn compare_targets(maps: &TargetMaps, oracle: &[Vec<OracleCell>], tol: f64) -> Result<(), String> {
    if maps.levels.len() != oracle.len() {
        return Err(format!("{} levels vs {}", maps.levels.len(), oracle.len()));
    }
    for (lt, cells) in maps.levels.iter().zip(oracle) {
        if lt.class_map.len() != cells.len() {
            return Err(format!("P{}: {} cells vs {}", lt.spec.level, lt.class_map.len(), cells.len()));
        }
        for (i, c) in cells.iter().enumerate() {
            if lt.class_map[i] != c.class {
                return Err(format!("P{} cell {i}: class {} vs oracle {}", lt.spec.level, lt.class_map[i], c.class));
            }
            if c.class < 0 {
                continue;
            }
            for k in 0..4 {
                if (lt.reg[i][k] - c.reg[k]).abs() > tol {
                    return Err(format!("P{} cell {i}: reg {:?} vs {:?}", lt.spec.level, lt.reg[i], c.reg));
                }
            }
            if (lt.ctr[i] - c.ctr).abs() > tol {
                return Err(format!("P{} cell {i}: ctr {} vs {}", lt.spec.level, lt.ctr[i], c.ctr));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- postprocess

fn ranks_before(a: &Detection, b: &Detection) -> bool {
    let ka = [-a.score, a.bbox.x_min, a.bbox.y_min, a.class_id as f64, a.bbox.x_max, a.bbox.y_max];
    let kb = [-b.score, b.bbox.x_min, b.bbox.y_min, b.class_id as f64, b.bbox.x_max, b.bbox.y_max];
    for (x, y) in ka.iter().zip(&kb) {
        if x != y {
            return x < y;
        }
    }
    false
}

/// Quadratic greedy suppression: take the best remaining box, drop every
/// same-class box overlapping it, repeat.
pub fn nms_ref(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut remaining = dets.to_vec();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            if ranks_before(&remaining[i], &remaining[best]) {
                best = i;
            }
        }
        let b = remaining.remove(best);
        remaining.retain(|d| d.class_id != b.class_id || iou_ref(&d.bbox, &b.bbox) <= thr);
        kept.push(b);
    }
    kept
}

pub fn random_detections(r: &mut ChaCha8Rng, n: usize, classes: usize, w: f64, h: f64) -> Vec<Detection> {
    // coarse scores and coordinates so that ties occur
    (0..n)
        .map(|_| Detection {
            class_id: r.random_range(0..classes),
            score: (r.random_range(1..=40) as f64) / 40.0,
            bbox: random_box(r, w, h, 4.0),
        })
        .collect()
}

// ---------------------------------------------------------------- evaluation

/// Exhaustive matcher: among all one-to-one same-class assignments with
/// IoU at or above `thr`, pick the one whose per-detection (IoU, -gt index)
/// sequence, in stable descending score order, is lexicographically largest.
pub fn match_ref(dets: &[Detection], gts: &[BoxAnnotation], thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // insertion sort keeps it obviously stable
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && dets[order[j - 1]].score < dets[order[j]].score {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut best_key: Option<Vec<(f64, i64)>> = None;
    let mut best_assign = vec![None; dets.len()];
    let mut assign = vec![None; dets.len()];
    let mut used = vec![false; gts.len()];
    fn rec(
        k: usize,
        order: &[usize],
        dets: &[Detection],
        gts: &[BoxAnnotation],
        thr: f64,
        used: &mut [bool],
        assign: &mut [Option<usize>],
        best_key: &mut Option<Vec<(f64, i64)>>,
        best_assign: &mut Vec<Option<usize>>,
    ) {
        if k == order.len() {
            let key: Vec<(f64, i64)> = order
                .iter()
                .map(|&d| match assign[d] {
                    Some(g) => (iou_ref(&dets[d].bbox, &gts[g].bbox), -(g as i64)),
                    None => (-1.0, 0),
                })
                .collect();
            let better = match best_key {
                None => true,
                Some(b) => key.iter().zip(b.iter()).find(|(x, y)| x != y).is_some_and(|(x, y)| x > y),
            };
            if better {
                *best_key = Some(key);
                best_assign.clone_from_slice(assign);
            }
            return;
        }
        let d = order[k];
        assign[d] = None;
        rec(k + 1, order, dets, gts, thr, used, assign, best_key, best_assign);
        for g in 0..gts.len() {
            if used[g] || gts[g].class_id != dets[d].class_id || iou_ref(&dets[d].bbox, &gts[g].bbox) < thr {
                continue;
            }
            used[g] = true;
            assign[d] = Some(g);
            rec(k + 1, order, dets, gts, thr, used, assign, best_key, best_assign);
            used[g] = false;
            assign[d] = None;
        }
    }
    rec(0, &order, dets, gts, thr, &mut used, &mut assign, &mut best_key, &mut best_assign);
    best_assign.iter().map(Option::is_some).collect()
}

/// 101-point AP from the definition: at each recall level, the best
/// precision reached at that recall or beyond.
pub fn ap_ref(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.partial_cmp(&scored[a].0).unwrap());
    let mut points = Vec::new();
    let mut tp = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if scored[i].1 {
            tp += 1.0;
        }
        points.push((tp / n_gt as f64, tp / (rank + 1) as f64));
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        total += points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
    }
    total / 101.0
}

// ---------------------------------------------------------------- gradient check

pub struct GradientFixture {
    pub network: Network<f64>,
    pub input: Tensor<f64>,
    pub maps: TargetMaps,
    pub heatmaps: KeypointHeatmapStack,
}

pub const GRAD_SIZE: (u32, u32) = (128, 128);

/// Tiny K=3 network with `stacks` hourglasses on a 128x128 input with a scene that puts
/// positives on every level (ranges scaled by 1/16).
pub fn gradient_fixture(seed: u64, stacks: usize) -> GradientFixture {
    let mut network = Network::<f64>::new(BackboneConfig::tiny(stacks, 3), seed).unwrap();
    let levels = scaled_levels(1.0 / 16.0);
    network.set_levels(levels.clone());
    let mut r = rng(seed ^ 0x9e37);
    // nonzero alignment so pose features also reach the classification tower
    let ids: Vec<_> =
        network.params().iter().filter(|(_, n, _)| n.starts_with("pose_align")).map(|(id, _, _)| id).collect();
    for id in ids {
        for v in network.params_mut().get_mut(id).data_mut() {
            *v = r.random_range(-0.05..0.05);
        }
    }
    let boxes = vec![
        BoxAnnotation { class_id: 0, bbox: BBox::new(0.0, 0.0, 128.0, 128.0) },
        BoxAnnotation { class_id: 1, bbox: BBox::new(2.0, 3.0, 60.0, 62.0) },
        BoxAnnotation { class_id: 2, bbox: BBox::new(66.0, 70.0, 90.0, 93.0) },
        BoxAnnotation { class_id: 1, bbox: BBox::new(100.0, 8.0, 113.0, 22.0) },
        BoxAnnotation { class_id: 0, bbox: BBox::new(1.0, 97.0, 8.0, 105.0) },
        BoxAnnotation { class_id: 2, bbox: BBox::new(9.0, 9.0, 15.0, 15.0) },
        BoxAnnotation { class_id: 0, bbox: BBox::new(34.0, 35.0, 46.0, 47.0) },
    ];
    let maps = assign_targets(&boxes, &levels, GRAD_SIZE).unwrap();
    let points = (0..3)
        .map(|_| Some(Keypoint { x: r.random_range(8.0..120.0), y: r.random_range(8.0..120.0), confidence: 1.0 }))
        .collect();
    let heatmaps = render_heatmaps(&[KeypointSet { person_index: 0, points }], 3, GRAD_SIZE, 2.0);
    let data = (0..3 * 128 * 128).map(|_| r.random_range(-1.5..1.5)).collect();
    let input = Tensor::new(vec![1, 3, 128, 128], data);
    GradientFixture { network, input, maps, heatmaps }
}

impl GradientFixture {
    pub fn loss(&self, network: &Network<f64>) -> f64 {
        let out = network.predict(self.input.clone()).unwrap();
        let targets = [SampleTargets { maps: &self.maps, heatmaps: Some(&self.heatmaps) }];
        composite_loss(&out, &targets, &LossConfig::default()).unwrap().0.total
    }
}

#[derive(Debug)]
pub struct GroupCheck {
    pub name: String,
    pub grad_norm: f64,
    /// Worst `|finite difference - analytic| / |gradient|` over the probed directions.
    pub rel_err: f64,
}

/// Step sizes tried per direction. ReLU kinks inside the step inflate the
/// difference quotient, roundoff dominates at tiny steps, so the best is kept.
pub const GRAD_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];

/// Compare analytic directional derivatives with central differences for
/// every selected parameter tensor, along the gradient and along a random direction.
pub fn gradient_check(fx: &GradientFixture, select: impl Fn(&str) -> bool) -> Vec<GroupCheck> {
    let targets = [SampleTargets { maps: &fx.maps, heatmaps: Some(&fx.heatmaps) }];
    let (_, grads) = loss_and_gradients(&fx.network, fx.input.clone(), &targets, &LossConfig::default()).unwrap();
    let mut r = rng(17);
    let mut out = Vec::new();
    let ids: Vec<_> = fx.network.params().ids().collect();
    for id in ids {
        let name = fx.network.params().name(id).to_string();
        let g =
            grads.get(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; fx.network.params().get(id).len()]);
        let random: Vec<f64> = (0..g.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        if !select(&name) {
            continue;
        }
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rnorm = random.iter().map(|v| v * v).sum::<f64>().sqrt();
        let along_grad: Vec<f64> = if norm > 0.0 { g.iter().map(|v| v / norm).collect() } else { random.clone() };
        let mut worst: f64 = 0.0;
        for dir in [along_grad, random.iter().map(|v| v / rnorm).collect()] {
            let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let mut best = f64::INFINITY;
            for eps in GRAD_STEPS {
                let shifted = |sign: f64| {
                    let mut net = fx.network.clone();
                    for (p, d) in net.params_mut().get_mut(id).data_mut().iter_mut().zip(&dir) {
                        *p += sign * eps * d;
                    }
                    fx.loss(&net)
                };
                let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * eps);
                best = best.min((fd - analytic).abs() / norm.max(1e-8));
            }
            worst = worst.max(best);
        }
        out.push(GroupCheck { name, grad_norm: norm, rel_err: worst });
    }
    out
}
