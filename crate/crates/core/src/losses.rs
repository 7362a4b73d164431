//! Composite training objective.
//!
//! `total = l_cls + λ·l_reg + l_cen + l_kpt`, where the three detection terms
//! are sums over the whole batch divided by `max(n_pos, 1)` and the keypoint
//! term is the per-sample sum over stages of heatmap MSE, averaged over the
//! batch. Every function returns the value together with its gradient with
//! respect to the network outputs, so the caller can seed backpropagation.

use posedet_tensor::{Float, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::NetworkOutputs;
use crate::pose::KeypointHeatmapStack;
use crate::targets::TargetMaps;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("non-finite classification logit {0}")]
    NonFiniteLogit(f64),
    #[error("regression distances must be positive, got {0:?}")]
    NonPositiveDistance([f64; 4]),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

impl LossError {
    pub fn kind(&self) -> &'static str {
        match self {
            LossError::NonFiniteLogit(_) => "NonFiniteLogit",
            LossError::NonPositiveDistance(_) => "NonPositiveDistance",
            LossError::ShapeMismatch(_) => "ShapeMismatch",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Weight of the regression term.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { focal_alpha: 0.25, focal_gamma: 2.0, lambda: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_cen: f64,
    pub l_kpt: f64,
    pub total: f64,
    pub n_pos: usize,
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid focal loss of one logit and its derivative.
pub fn focal_term(z: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let q = sigmoid(-z);
    if positive {
        let ln_p = -softplus(-z);
        let w = alpha * q.powf(gamma);
        (-w * ln_p, w * (gamma * p * ln_p - q))
    } else {
        let ln_q = -softplus(z);
        let w = (1.0 - alpha) * p.powf(gamma);
        (-w * ln_q, w * (p - gamma * q * ln_q))
    }
}

/// Binary cross-entropy on a logit and its derivative.
pub fn bce_term(z: f64, target: f64) -> (f64, f64) {
    (softplus(z) - target * z, sigmoid(z) - target)
}

/// `-ln IoU` of two boxes sharing a location, with the gradient w.r.t. `pred`.
pub fn iou_term(pred: [f64; 4], target: [f64; 4]) -> Result<(f64, [f64; 4]), LossError> {
    if pred.iter().any(|&v| !(v > 0.0)) {
        return Err(LossError::NonPositiveDistance(pred));
    }
    if target.iter().any(|&v| !(v > 0.0)) {
        return Err(LossError::NonPositiveDistance(target));
    }
    let [l, t, r, b] = pred;
    let [tl, tt, tr, tb] = target;
    let pred_area = (l + r) * (t + b);
    let target_area = (tl + tr) * (tt + tb);
    let iw = l.min(tl) + r.min(tr);
    let ih = t.min(tt) + b.min(tb);
    let inter = iw * ih;
    let union = pred_area + target_area - inter;
    let loss = union.ln() - inter.ln();
    // d(inter)/d(side): the intersection only grows with a side while it is the smaller one
    let di = [
        if l < tl { ih } else { 0.0 },
        if t < tt { iw } else { 0.0 },
        if r < tr { ih } else { 0.0 },
        if b < tb { iw } else { 0.0 },
    ];
    let da = [t + b, l + r, t + b, l + r];
    let grad = std::array::from_fn(|k| (da[k] - di[k]) / union - di[k] / inter);
    Ok((loss, grad))
}

/// Focal loss over flattened per-location logits.
///
/// `logits[loc * num_classes + c]`, `classes[loc]` is the target class or -1.
pub fn focal_loss(logits: &[f64], classes: &[i32], num_classes: usize, n_pos: usize) -> Result<f64, LossError> {
    if logits.len() != classes.len() * num_classes {
        return Err(LossError::ShapeMismatch(format!(
            "{} logits for {} locations x {num_classes} classes",
            logits.len(),
            classes.len()
        )));
    }
    let cfg = LossConfig::default();
    let mut sum = 0.0;
    for (loc, &cls) in classes.iter().enumerate() {
        for c in 0..num_classes {
            let z = logits[loc * num_classes + c];
            if !z.is_finite() {
                return Err(LossError::NonFiniteLogit(z));
            }
            sum += focal_term(z, cls == c as i32, cfg.focal_alpha, cfg.focal_gamma).0;
        }
    }
    Ok(sum / n_pos.max(1) as f64)
}

/// IoU loss summed over positives and divided by `max(n_pos, 1)`.
pub fn iou_loss(preds: &[[f64; 4]], targets: &[[f64; 4]], n_pos: usize) -> Result<f64, LossError> {
    if preds.len() != targets.len() {
        return Err(LossError::ShapeMismatch(format!("{} predictions vs {} targets", preds.len(), targets.len())));
    }
    let mut sum = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        sum += iou_term(*p, *t)?.0;
    }
    Ok(sum / n_pos.max(1) as f64)
}

/// Center-ness BCE summed over positives and divided by `max(n_pos, 1)`.
pub fn centerness_loss(logits: &[f64], targets: &[f64], n_pos: usize) -> Result<f64, LossError> {
    if logits.len() != targets.len() {
        return Err(LossError::ShapeMismatch(format!("{} logits vs {} targets", logits.len(), targets.len())));
    }
    let sum: f64 = logits.iter().zip(targets).map(|(&z, &y)| bce_term(z, y).0).sum();
    Ok(sum / n_pos.max(1) as f64)
}

/// Sum over stages of the mean squared heatmap error; 0 when `mask` is false.
pub fn keypoint_loss(stages: &[&[f64]], target: &[f64], mask: bool) -> Result<f64, LossError> {
    if let Some(bad) = stages.iter().find(|s| s.len() != target.len()) {
        return Err(LossError::ShapeMismatch(format!("stage has {} values, target {}", bad.len(), target.len())));
    }
    if !mask || target.is_empty() {
        return Ok(0.0);
    }
    let n = target.len() as f64;
    Ok(stages.iter().map(|s| s.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n).sum())
}

/// Gradients of `total` with respect to each network output, in the same layout.
#[derive(Clone, Debug)]
pub struct OutputGradients<F> {
    pub cls_logits: Vec<Tensor<F>>,
    pub reg: Vec<Tensor<F>>,
    pub ctr_logits: Vec<Tensor<F>>,
    pub heatmaps: Vec<Tensor<F>>,
}

/// Per-sample supervision for one batch element.
pub struct SampleTargets<'a> {
    pub maps: &'a TargetMaps,
    /// `None` when the sample carries no usable keypoints.
    pub heatmaps: Option<&'a KeypointHeatmapStack>,
}

/// Evaluate the composite objective on a batch and its output gradients.
pub fn composite_loss<F: Float>(
    outputs: &NetworkOutputs<Tensor<F>>,
    targets: &[SampleTargets<'_>],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, OutputGradients<F>), LossError> {
    let batch = targets.len();
    if outputs.levels.len() != targets.first().map_or(0, |t| t.maps.levels.len()) {
        return Err(LossError::ShapeMismatch("level count differs between outputs and targets".into()));
    }
    let n_pos: usize = targets.iter().map(|t| t.maps.n_pos()).sum();
    let norm = n_pos.max(1) as f64;
    let mut out = LossBreakdown { n_pos, ..Default::default() };
    let mut grads =
        OutputGradients { cls_logits: Vec::new(), reg: Vec::new(), ctr_logits: Vec::new(), heatmaps: Vec::new() };

    for (li, level) in outputs.levels.iter().enumerate() {
        let (n, c, h, w) = level.cls_logits.dims4();
        if n != batch {
            return Err(LossError::ShapeMismatch(format!("batch {n} outputs vs {batch} targets")));
        }
        let plane = h * w;
        let mut g_cls = vec![F::zero(); n * c * plane];
        let mut g_reg = vec![F::zero(); n * 4 * plane];
        let mut g_ctr = vec![F::zero(); n * plane];
        let cls = level.cls_logits.data();
        let reg = level.reg.data();
        let ctr = level.ctr_logits.data();
        for (s, st) in targets.iter().enumerate() {
            let lt = &st.maps.levels[li];
            if lt.height != h || lt.width != w {
                return Err(LossError::ShapeMismatch(format!(
                    "level {} target {}x{} vs output {h}x{w}",
                    lt.spec.level, lt.height, lt.width
                )));
            }
            for loc in 0..plane {
                let target_class = lt.class_map[loc];
                for k in 0..c {
                    let idx = (s * c + k) * plane + loc;
                    let z = cls[idx].to_f64_lossy();
                    if !z.is_finite() {
                        return Err(LossError::NonFiniteLogit(z));
                    }
                    let (v, d) = focal_term(z, target_class == k as i32, cfg.focal_alpha, cfg.focal_gamma);
                    out.l_cls += v;
                    g_cls[idx] = F::lit(d / norm);
                }
                if target_class < 0 {
                    continue;
                }
                let pred: [f64; 4] = std::array::from_fn(|k| reg[(s * 4 + k) * plane + loc].to_f64_lossy());
                let (v, d) = iou_term(pred, lt.reg[loc])?;
                out.l_reg += v;
                for k in 0..4 {
                    g_reg[(s * 4 + k) * plane + loc] = F::lit(cfg.lambda * d[k] / norm);
                }
                let (v, d) = bce_term(ctr[s * plane + loc].to_f64_lossy(), lt.ctr[loc]);
                out.l_cen += v;
                g_ctr[s * plane + loc] = F::lit(d / norm);
            }
        }
        grads.cls_logits.push(Tensor::new(vec![n, c, h, w], g_cls));
        grads.reg.push(Tensor::new(vec![n, 4, h, w], g_reg));
        grads.ctr_logits.push(Tensor::new(vec![n, 1, h, w], g_ctr));
    }
    out.l_cls /= norm;
    out.l_reg /= norm;
    out.l_cen /= norm;

    for stage in &outputs.heatmaps {
        let (n, k, h, w) = stage.dims4();
        let per_sample = k * h * w;
        let mut g = vec![F::zero(); n * per_sample];
        let pred = stage.data();
        for (s, st) in targets.iter().enumerate() {
            let Some(hm) = st.heatmaps else { continue };
            if hm.channels != k || hm.height != h || hm.width != w {
                return Err(LossError::ShapeMismatch(format!(
                    "heatmap target {}x{}x{} vs prediction {k}x{h}x{w}",
                    hm.channels, hm.height, hm.width
                )));
            }
            let scale = 1.0 / (per_sample as f64 * batch as f64);
            let mut sq = 0.0;
            for (i, &t) in hm.maps.iter().enumerate() {
                let e = pred[s * per_sample + i].to_f64_lossy() - t;
                sq += e * e;
                g[s * per_sample + i] = F::lit(2.0 * e * scale);
            }
            out.l_kpt += sq * scale;
        }
        grads.heatmaps.push(Tensor::new(vec![n, k, h, w], g));
    }
    out.total = out.l_cls + cfg.lambda * out.l_reg + out.l_cen + out.l_kpt;
    Ok((out, grads))
}
