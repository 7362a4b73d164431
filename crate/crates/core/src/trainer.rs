//! Optimization loop, checkpointing and the ablation grid.
//!
//! Every random decision is derived from `(seed, epoch)` or `(seed, step)`,
//! so a run resumed from a checkpoint continues bit for bit.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use posedet_tensor::{Float, Gradients, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{BoxAnnotation, ClassMap, ImageSample, Keypoint};
use crate::evaluation::{evaluate, render_aligned, EvalReport};
use crate::losses::{composite_loss, LossBreakdown, LossConfig, LossError, SampleTargets};
use crate::network::checkpoint::{load_checkpoint, save_checkpoint};
use crate::network::{BackboneConfig, BackboneVariant, Network, NetworkError, Normalization};
use crate::pose::{flip_permutation, has_present_keypoints, render_heatmaps, KeypointHeatmapStack, DEFAULT_SIGMA};
use crate::postprocess::{detect, Detection, PostprocessConfig};
use crate::targets::{assign_targets, scaled_levels, TargetError, TargetMaps};

const MOMENTUM_PREFIX: &str = "optim.momentum.";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    CorpusEmpty,
    #[error("loss diverged at step {step}: {breakdown:?}")]
    DivergedLoss { step: usize, breakdown: LossBreakdown },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("sample {image_id} is {got:?}, expected input size {expected:?}")]
    SizeMismatch { image_id: String, got: (u32, u32), expected: (u32, u32) },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl TrainError {
    pub fn kind(&self) -> &'static str {
        match self {
            TrainError::CorpusEmpty => "CorpusEmpty",
            TrainError::DivergedLoss { .. } => "DivergedLoss",
            TrainError::InvalidConfig(_) => "InvalidConfig",
            TrainError::SizeMismatch { .. } => "SizeMismatch",
            TrainError::Network(e) => e.kind(),
            TrainError::Loss(LossError::NonFiniteLogit(_)) => "DivergedLoss",
            TrainError::Loss(e) => e.kind(),
            TrainError::Target(_) => "IndivisibleInput",
            TrainError::Io { .. } => "IoError",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: BackboneConfig,
    /// Network input `(width, height)`; samples must already have this size.
    pub input_size: (u32, u32),
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    /// Learning-rate multiplier at the first warmup step.
    pub warmup_factor: f64,
    /// Steps at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub heatmap_sigma: f64,
    /// Multiplier on every finite regression-range bound.
    pub range_scale: f64,
    pub flip_prob: f64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: BackboneConfig::tiny(1, 17),
            input_size: (256, 128),
            batch_size: 4,
            base_lr: 0.01,
            warmup_steps: 100,
            warmup_factor: 1.0 / 3.0,
            milestones: Vec::new(),
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip_norm: 10.0,
            max_steps: 1000,
            seed: 0,
            loss: LossConfig::default(),
            heatmap_sigma: DEFAULT_SIGMA,
            range_scale: 1.0,
            flip_prob: 0.5,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        self.model.validate()?;
        if !(self.loss.lambda > 0.0) {
            return bad(format!("lambda must be positive, got {}", self.loss.lambda));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("need base_lr > 0, 0 <= momentum < 1 and weight_decay >= 0".into());
        }
        if !(self.range_scale > 0.0) {
            return bad("range_scale must be positive".into());
        }
        if !(self.grad_clip_norm > 0.0) || !(self.heatmap_sigma > 0.0) || !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("need grad_clip_norm > 0, heatmap_sigma > 0 and flip_prob in [0, 1]".into());
        }
        crate::targets::check_input_size(self.input_size.0, self.input_size.1)?;
        Ok(())
    }

    /// Learning rate used at zero-based `step`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let warm = if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            self.warmup_factor + (1.0 - self.warmup_factor) * t
        } else {
            1.0
        };
        let decays = self.milestones.iter().filter(|&&m| step >= m).count();
        self.base_lr * warm * self.lr_decay.powi(decays as i32)
    }
}

/// One JSON-lines log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub images_per_sec: f64,
}

/// Mirror an image sample left to right, swapping paired keypoint channels.
pub fn flip_sample(sample: &ImageSample) -> ImageSample {
    let (w, _) = sample.size();
    let wf = w as f64;
    let perm = flip_permutation(sample.keypoints.first().map_or(0, |s| s.points.len()));
    ImageSample {
        image_id: sample.image_id.clone(),
        pixels: image::imageops::flip_horizontal(&sample.pixels),
        boxes: sample
            .boxes
            .iter()
            .map(|b| BoxAnnotation { class_id: b.class_id, bbox: b.bbox.flip_horizontal(wf) })
            .collect(),
        keypoints: sample
            .keypoints
            .iter()
            .map(|s| {
                let mirrored = s.map_points(|p| Keypoint { x: wf - p.x, ..*p });
                let mut points = mirrored.points.clone();
                for (k, &src) in perm.iter().enumerate() {
                    points[k] = mirrored.points[src];
                }
                crate::annotation::KeypointSet { person_index: s.person_index, points }
            })
            .collect(),
        source_size: sample.source_size,
    }
}

/// Supervision for a sample, computed once per orientation.
struct Prepared {
    pixels: RgbImage,
    maps: TargetMaps,
    heatmaps: Option<KeypointHeatmapStack>,
}

struct Dataset {
    samples: Vec<ImageSample>,
    cache: Vec<[Option<Prepared>; 2]>,
}

impl Dataset {
    fn prepared(
        &mut self,
        i: usize,
        flipped: bool,
        net: &Network<f32>,
        cfg: &TrainConfig,
    ) -> Result<&Prepared, TrainError> {
        let slot = flipped as usize;
        if self.cache[i][slot].is_none() {
            let s = if flipped { flip_sample(&self.samples[i]) } else { self.samples[i].clone() };
            let maps = assign_targets(&s.boxes, net.levels(), cfg.input_size)?;
            let heatmaps = (cfg.model.has_pose_branch() && has_present_keypoints(&s.keypoints))
                .then(|| render_heatmaps(&s.keypoints, cfg.model.num_keypoints, cfg.input_size, cfg.heatmap_sigma));
            self.cache[i][slot] = Some(Prepared { pixels: s.pixels, maps, heatmaps });
        }
        Ok(self.cache[i][slot].as_ref().unwrap())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Composite loss of one batch and its gradient with respect to every parameter.
pub fn loss_and_gradients<F: Float>(
    network: &Network<F>,
    input: Tensor<F>,
    targets: &[SampleTargets<'_>],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Gradients<F>), TrainError> {
    let mut g = Graph::new(network.params());
    let x = g.input(input);
    let out = network.forward(&mut g, x)?;
    let values = out.values(&g);
    let (breakdown, og) = composite_loss(&values, targets, cfg)?;
    let mut seeds = Vec::new();
    for (i, lv) in out.levels.iter().enumerate() {
        seeds.push((lv.cls_logits, og.cls_logits[i].clone()));
        seeds.push((lv.reg, og.reg[i].clone()));
        seeds.push((lv.ctr_logits, og.ctr_logits[i].clone()));
    }
    for (v, t) in out.heatmaps.iter().zip(og.heatmaps) {
        seeds.push((*v, t));
    }
    Ok((breakdown, g.backward(seeds)))
}

pub struct Trainer {
    config: TrainConfig,
    network: Network<f32>,
    normalization: Normalization,
    momentum: Vec<Tensor<f32>>,
    step: usize,
    data: Dataset,
    epoch_order: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    /// Fresh run over `samples`; normalization statistics come from the corpus.
    pub fn new(config: TrainConfig, samples: Vec<ImageSample>) -> Result<Self, TrainError> {
        config.validate()?;
        let network = Network::new(config.model.clone(), config.seed)?;
        let normalization = Normalization::from_images(samples.iter().map(|s| &s.pixels));
        Self::assemble(config, network, normalization, None, 0, samples)
    }

    /// Continue a run from a checkpoint written by [`Trainer::save`].
    pub fn resume(checkpoint: &Path, samples: Vec<ImageSample>) -> Result<Self, TrainError> {
        let ck = load_checkpoint(checkpoint)?;
        let config: TrainConfig = serde_json::from_value(ck.meta["train_config"].clone())
            .map_err(|e| TrainError::InvalidConfig(format!("checkpoint lacks a training config: {e}")))?;
        let step = ck.meta["step"].as_u64().unwrap_or(0) as usize;
        if config.model != *ck.network.config() {
            return Err(NetworkError::ConfigMismatch("training config and checkpoint model differ".into()).into());
        }
        let momentum: Vec<Tensor<f32>> = ck
            .network
            .params()
            .iter()
            .map(|(_, name, t)| {
                ck.extra.get(&format!("{MOMENTUM_PREFIX}{name}")).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();
        Self::assemble(config, ck.network, ck.normalization, Some(momentum), step, samples)
    }

    fn assemble(
        config: TrainConfig,
        network: Network<f32>,
        normalization: Normalization,
        momentum: Option<Vec<Tensor<f32>>>,
        step: usize,
        samples: Vec<ImageSample>,
    ) -> Result<Self, TrainError> {
        if samples.is_empty() {
            return Err(TrainError::CorpusEmpty);
        }
        if let Some(s) = samples.iter().find(|s| s.size() != config.input_size) {
            return Err(TrainError::SizeMismatch {
                image_id: s.image_id.clone(),
                got: s.size(),
                expected: config.input_size,
            });
        }
        let mut network = network;
        network.set_levels(scaled_levels(config.range_scale));
        let momentum =
            momentum.unwrap_or_else(|| network.params().iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect());
        let cache = samples.iter().map(|_| [None, None]).collect();
        Ok(Trainer {
            config,
            network,
            normalization,
            momentum,
            step,
            data: Dataset { samples, cache },
            epoch_order: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn network(&self) -> &Network<f32> {
        &self.network
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// Number of completed optimization steps.
    pub fn step_count(&self) -> usize {
        self.step
    }

    fn sample_index(&mut self, global: usize) -> usize {
        let n = self.data.samples.len();
        let epoch = global / n;
        if self.epoch_order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream_rng(self.config.seed, 2 * epoch as u64 + 1));
            self.epoch_order = Some((epoch, order));
        }
        self.epoch_order.as_ref().unwrap().1[global % n]
    }

    /// Run one optimization step.
    pub fn train_step(&mut self) -> Result<StepRecord, TrainError> {
        let started = Instant::now();
        let cfg = self.config.clone();
        let step = self.step;
        let mut flip_rng = stream_rng(cfg.seed, 2 * step as u64 + 2);
        let picks: Vec<(usize, bool)> = (0..cfg.batch_size)
            .map(|b| {
                let i = self.sample_index(step * cfg.batch_size + b);
                (i, flip_rng.random::<f64>() < cfg.flip_prob)
            })
            .collect();
        for &(i, f) in &picks {
            self.data.prepared(i, f, &self.network, &cfg)?;
        }
        let prepared: Vec<&Prepared> =
            picks.iter().map(|&(i, f)| self.data.cache[i][f as usize].as_ref().unwrap()).collect();
        let images: Vec<&RgbImage> = prepared.iter().map(|p| &p.pixels).collect();
        let input = self.normalization.to_tensor::<f32>(&images);
        let targets: Vec<SampleTargets<'_>> =
            prepared.iter().map(|p| SampleTargets { maps: &p.maps, heatmaps: p.heatmaps.as_ref() }).collect();

        let (breakdown, mut grads) = match loss_and_gradients(&self.network, input, &targets, &cfg.loss) {
            Ok(v) => v,
            Err(TrainError::Loss(LossError::NonFiniteLogit(_))) => {
                let breakdown = LossBreakdown { total: f64::NAN, ..Default::default() };
                return Err(TrainError::DivergedLoss { step, breakdown });
            }
            Err(e) => return Err(e),
        };
        if !breakdown.total.is_finite() {
            return Err(TrainError::DivergedLoss { step, breakdown });
        }

        let grad_norm = grads.global_norm() as f64;
        if !grad_norm.is_finite() {
            return Err(TrainError::DivergedLoss { step, breakdown });
        }
        if grad_norm > cfg.grad_clip_norm {
            grads.scale((cfg.grad_clip_norm / grad_norm) as f32);
        }
        let lr = cfg.learning_rate(step);
        let (mu, wd) = (cfg.momentum as f32, cfg.weight_decay as f32);
        let ids: Vec<_> = self.network.params().ids().collect();
        for id in ids {
            let Some(grad) = grads.get(id) else { continue };
            let param = self.network.params_mut().get_mut(id);
            // decay applies to convolution kernels only
            let decay = if param.shape().len() == 4 { wd } else { 0.0 };
            let vel = self.momentum[id.index()].data_mut();
            let p = param.data_mut();
            for ((v, w), d) in vel.iter_mut().zip(p.iter_mut()).zip(grad.data()) {
                *v = mu * *v + d + decay * *w;
                *w -= lr as f32 * *v;
            }
        }
        self.step += 1;
        let secs = started.elapsed().as_secs_f64();
        Ok(StepRecord {
            step: self.step,
            lr,
            loss: breakdown,
            grad_norm,
            images_per_sec: cfg.batch_size as f64 / secs.max(1e-9),
        })
    }

    /// Train until `max_steps`, appending a record per step to `log` and
    /// writing checkpoints to `checkpoint` at the configured interval and at the end.
    pub fn run(
        &mut self,
        max_steps: usize,
        mut log: Option<&mut dyn std::io::Write>,
        checkpoint: Option<&Path>,
    ) -> Result<Vec<StepRecord>, TrainError> {
        let mut records = Vec::new();
        while self.step < max_steps {
            let rec = self.train_step()?;
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&rec).expect("step record serializes");
                writeln!(w, "{line}").map_err(|source| TrainError::Io { path: PathBuf::from("<log>"), source })?;
            }
            records.push(rec);
            let interval = self.config.checkpoint_interval;
            if let Some(path) = checkpoint {
                if (interval > 0 && self.step % interval == 0) || self.step == max_steps {
                    self.save(path)?;
                }
            }
        }
        Ok(records)
    }

    /// Save parameters, normalization, optimizer state and progress.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let extra: BTreeMap<String, Tensor<f32>> = self
            .network
            .params()
            .iter()
            .map(|(id, name, _)| (format!("{MOMENTUM_PREFIX}{name}"), self.momentum[id.index()].clone()))
            .collect();
        let meta = serde_json::json!({
            "step": self.step,
            "seed": self.config.seed,
            "train_config": self.config,
        });
        save_checkpoint(path, &self.network, &self.normalization, &extra, meta)?;
        Ok(())
    }
}

/// Train from scratch with a JSON-lines log file; returns the step records.
pub fn train(
    config: &TrainConfig,
    samples: Vec<ImageSample>,
    checkpoint: &Path,
    log_path: Option<&Path>,
) -> Result<Vec<StepRecord>, TrainError> {
    let mut trainer = Trainer::new(config.clone(), samples)?;
    run_with_log(&mut trainer, config.max_steps, checkpoint, log_path)
}

/// Append to `log_path` (if any) while running to `max_steps`.
pub fn run_with_log(
    trainer: &mut Trainer,
    max_steps: usize,
    checkpoint: &Path,
    log_path: Option<&Path>,
) -> Result<Vec<StepRecord>, TrainError> {
    match log_path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|source| TrainError::Io { path: dir.to_path_buf(), source })?;
            }
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|source| TrainError::Io { path: p.to_path_buf(), source })?;
            let recs = trainer.run(max_steps, Some(&mut f), Some(checkpoint))?;
            f.flush().map_err(|source| TrainError::Io { path: p.to_path_buf(), source })?;
            Ok(recs)
        }
        None => trainer.run(max_steps, None, Some(checkpoint)),
    }
}

/// Run the detector over `samples` in batches.
pub fn predict_samples(
    network: &Network<f32>,
    normalization: &Normalization,
    samples: &[ImageSample],
    post: &PostprocessConfig,
    batch_size: usize,
) -> Result<Vec<Vec<Detection>>, TrainError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<&RgbImage> = chunk.iter().map(|s| &s.pixels).collect();
        let size = images[0].dimensions();
        let outputs = network.predict(normalization.to_tensor(&images))?;
        for i in 0..chunk.len() {
            out.push(detect(&outputs, network.levels(), i, size, post)?);
        }
    }
    Ok(out)
}

/// Detect on `samples` and score against their boxes.
pub fn evaluate_network(
    network: &Network<f32>,
    normalization: &Normalization,
    samples: &[ImageSample],
    post: &PostprocessConfig,
    classes: &ClassMap,
) -> Result<EvalReport, TrainError> {
    let dets = predict_samples(network, normalization, samples, post, 8)?;
    let gts: Vec<Vec<BoxAnnotation>> = samples.iter().map(|s| s.boxes.clone()).collect();
    Ok(evaluate(&dets, &gts, classes))
}

/// One configuration of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub backbone: BackboneVariant,
    pub pose: bool,
    pub stacks: usize,
    pub seed: u64,
    pub report: EvalReport,
}

/// Method name used in tables: `baseline` without the pose branch, `pose-T<n>` with it.
pub fn method_name(stacks: usize) -> String {
    if stacks == 0 {
        "baseline".into()
    } else {
        format!("pose-T{stacks}")
    }
}

/// The backbone/stack grid at full scale: ResNet-50 with T in {0,1,2,4}
/// and ResNet-101 with T in {0,4}.
pub fn standard_grid(base: &TrainConfig) -> Vec<AblationEntry> {
    let mut rows = Vec::new();
    for (variant, stacks) in [
        (BackboneVariant::Resnet50, 0),
        (BackboneVariant::Resnet50, 4),
        (BackboneVariant::Resnet101, 0),
        (BackboneVariant::Resnet101, 4),
        (BackboneVariant::Resnet50, 1),
        (BackboneVariant::Resnet50, 2),
    ] {
        let model = BackboneConfig::for_variant(variant, stacks, base.model.num_keypoints);
        rows.push(AblationEntry {
            name: format!("{}-{}", method_name(stacks), variant.label()),
            config: TrainConfig { model, ..base.clone() },
        });
    }
    rows
}

/// Desk-scale grid over the tiny backbone for the given stack counts.
pub fn tiny_grid(base: &TrainConfig, stacks: &[usize]) -> Vec<AblationEntry> {
    stacks
        .iter()
        .map(|&t| AblationEntry {
            name: format!("{}-tiny", method_name(t)),
            config: TrainConfig { model: BackboneConfig { hourglass_count: t, ..base.model.clone() }, ..base.clone() },
        })
        .collect()
}

/// Train every grid entry on `train_set` and evaluate on `val_set`.
pub fn ablation_grid(
    grid: &[AblationEntry],
    train_set: &[ImageSample],
    val_set: &[ImageSample],
    post: &PostprocessConfig,
    classes: &ClassMap,
) -> Result<Vec<AblationRow>, TrainError> {
    grid.iter()
        .map(|entry| {
            let mut trainer = Trainer::new(entry.config.clone(), train_set.to_vec())?;
            trainer.run(entry.config.max_steps, None, None)?;
            let report = evaluate_network(trainer.network(), trainer.normalization(), val_set, post, classes)?;
            Ok(AblationRow {
                name: entry.name.clone(),
                backbone: entry.config.model.variant,
                pose: entry.config.model.has_pose_branch(),
                stacks: entry.config.model.hourglass_count,
                seed: entry.config.seed,
                report,
            })
        })
        .collect()
}

/// Method | backbone | pose | T | AP50 | AP75 | mAP, one row per entry.
pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let mut table = vec![["Method", "resnet", "pose", "T", "AP50", "AP75", "mAP"].map(String::from).to_vec()];
    for r in rows {
        table.push(vec![
            r.name.clone(),
            r.backbone.label().to_string(),
            if r.pose { "yes" } else { "no" }.to_string(),
            r.stacks.to_string(),
            format!("{:.1}", r.report.ap50 * 100.0),
            format!("{:.1}", r.report.ap75 * 100.0),
            format!("{:.1}", r.report.map * 100.0),
        ]);
    }
    render_aligned(&table)
}
