//! Detector forward computation.
//!
//! Backbone C3..C5 feed a feature pyramid P3..P7. When `hourglass_count > 0`
//! a stack of hourglasses runs on C3; its per-stage pose features are
//! concatenated, aligned to the pyramid width by a zero-initialized 1x1
//! convolution, average-pooled down to each level and added to P_i before
//! the classification tower. Regression and center-ness share a second
//! tower. Both towers are shared across levels; each level owns a scalar
//! `s_i` in the regression transform `exp(s_i * x)`.

mod backbone;
pub mod checkpoint;
mod config;
mod hourglass;
mod layers;

use image::RgbImage;
use posedet_tensor::{Float, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::targets::{check_input_size, standard_levels, LevelSpec, TargetError};
use backbone::Backbone;
pub use config::{BackboneConfig, BackboneVariant, SUPPORTED_STACKS};
use hourglass::PoseBranch;
use layers::{Builder, Conv, ConvNorm, Init};

/// Prior probability used to initialize the classification bias.
const CLS_PRIOR: f64 = 0.01;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("input size {width}x{height} is not divisible by 128")]
    IndivisibleInput { width: u32, height: u32 },
    #[error("parameters do not match the configuration: {0}")]
    ConfigMismatch(String),
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("checkpoint io on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl NetworkError {
    pub fn kind(&self) -> &'static str {
        match self {
            NetworkError::IndivisibleInput { .. } => "IndivisibleInput",
            NetworkError::ConfigMismatch(_) => "ConfigMismatch",
            NetworkError::InvalidConfig(_) => "InvalidConfig",
            NetworkError::Checkpoint { .. } => "MalformedCheckpoint",
            NetworkError::Io { .. } => "IoError",
        }
    }
}

impl From<TargetError> for NetworkError {
    fn from(e: TargetError) -> Self {
        match e {
            TargetError::IndivisibleInput { width, height } => NetworkError::IndivisibleInput { width, height },
            other => NetworkError::InvalidConfig(other.to_string()),
        }
    }
}

/// Per-channel pixel statistics in 0..255 units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: [127.5; 3], std: [64.0; 3] }
    }
}

impl Normalization {
    /// Channel mean and standard deviation over a set of images.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0u64;
        for img in images {
            for p in img.pixels() {
                for c in 0..3 {
                    let v = p.0[c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mut out = Self::default();
        for c in 0..3 {
            let mean = sum[c] / n as f64;
            out.mean[c] = mean;
            out.std[c] = (sq[c] / n as f64 - mean * mean).max(1.0).sqrt();
        }
        out
    }

    /// Stack images into a normalized `[N, 3, H, W]` tensor.
    pub fn to_tensor<F: Float>(&self, images: &[&RgbImage]) -> Tensor<F> {
        assert!(!images.is_empty());
        let (w, h) = images[0].dimensions();
        let plane = (w * h) as usize;
        let mut data = vec![F::zero(); images.len() * 3 * plane];
        for (s, img) in images.iter().enumerate() {
            assert_eq!(img.dimensions(), (w, h), "batch images must share a size");
            let base = s * 3 * plane;
            for (i, p) in img.pixels().enumerate() {
                for c in 0..3 {
                    data[base + c * plane + i] = F::lit((p.0[c] as f64 - self.mean[c]) / self.std[c]);
                }
            }
        }
        Tensor::new(vec![images.len(), 3, h as usize, w as usize], data)
    }
}

/// Head outputs of one pyramid level, NCHW.
#[derive(Clone, Debug)]
pub struct LevelOutputs<T> {
    pub cls_logits: T,
    /// Regression before the `exp(s_i * x)` transform.
    pub reg_raw: T,
    /// Positive side distances `(l, t, r, b)` in input pixels.
    pub reg: T,
    pub ctr_logits: T,
}

#[derive(Clone, Debug)]
pub struct NetworkOutputs<T> {
    pub levels: Vec<LevelOutputs<T>>,
    /// One `[N, K, H3, W3]` stack per hourglass stage.
    pub heatmaps: Vec<T>,
    pub pose_features: Vec<T>,
}

impl NetworkOutputs<Var> {
    pub fn values<F: Float>(&self, g: &Graph<'_, F>) -> NetworkOutputs<Tensor<F>> {
        let v = |x: &Var| g.value(*x).clone();
        NetworkOutputs {
            levels: self
                .levels
                .iter()
                .map(|l| LevelOutputs {
                    cls_logits: v(&l.cls_logits),
                    reg_raw: v(&l.reg_raw),
                    reg: v(&l.reg),
                    ctr_logits: v(&l.ctr_logits),
                })
                .collect(),
            heatmaps: self.heatmaps.iter().map(v).collect(),
            pose_features: self.pose_features.iter().map(v).collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct Pyramid {
    lateral: [Conv; 3],
    output: [Conv; 3],
    p6: Conv,
    p7: Conv,
}

impl Pyramid {
    fn build<F: Float>(bld: &mut Builder<'_, F>, inputs: [usize; 3], ch: usize) -> Self {
        bld.scoped("fpn", |bld| {
            let lateral =
                [3, 4, 5].map(|i| bld.conv(&format!("lateral{i}"), inputs[i - 3], ch, 1, 1, Some(0.0), Init::Kaiming));
            let output = [3, 4, 5].map(|i| bld.conv(&format!("output{i}"), ch, ch, 3, 1, Some(0.0), Init::Kaiming));
            let p6 = bld.conv("p6", ch, ch, 3, 2, Some(0.0), Init::Kaiming);
            let p7 = bld.conv("p7", ch, ch, 3, 2, Some(0.0), Init::Kaiming);
            Pyramid { lateral, output, p6, p7 }
        })
    }

    fn forward<F: Float>(&self, g: &mut Graph<'_, F>, c: [Var; 3]) -> [Var; 5] {
        let l5 = self.lateral[2].forward(g, c[2]);
        let l4 = self.lateral[1].forward(g, c[1]);
        let l3 = self.lateral[0].forward(g, c[0]);
        let up5 = g.upsample_nearest(l5, 2);
        let m4 = g.add(l4, up5);
        let up4 = g.upsample_nearest(m4, 2);
        let m3 = g.add(l3, up4);
        let p3 = self.output[0].forward(g, m3);
        let p4 = self.output[1].forward(g, m4);
        let p5 = self.output[2].forward(g, l5);
        let p6 = self.p6.forward(g, p5);
        let r6 = g.relu(p6);
        let p7 = self.p7.forward(g, r6);
        [p3, p4, p5, p6, p7]
    }
}

#[derive(Clone, Debug)]
struct Heads {
    cls_tower: Vec<ConvNorm>,
    cls_out: Conv,
    box_tower: Vec<ConvNorm>,
    reg_out: Conv,
    ctr_out: Conv,
    scales: Vec<ParamId>,
}

impl Heads {
    fn build<F: Float>(bld: &mut Builder<'_, F>, cfg: &BackboneConfig, levels: usize) -> Self {
        let ch = cfg.pyramid_channels;
        let head_init = Init::Normal(0.01);
        bld.scoped("head", |bld| {
            let tower = |bld: &mut Builder<'_, F>, name: &str| {
                bld.scoped(name, |bld| {
                    (0..cfg.tower_depth)
                        .map(|i| {
                            bld.scoped(i.to_string(), |bld| ConvNorm {
                                conv: bld.conv("conv", ch, ch, 3, 1, Some(0.0), head_init),
                                norm: bld.norm("norm", ch),
                                relu: true,
                            })
                        })
                        .collect::<Vec<_>>()
                })
            };
            let cls_tower = tower(bld, "cls_tower");
            let prior_bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
            let cls_out = bld.conv("cls_logits", ch, cfg.num_classes, 3, 1, Some(prior_bias), head_init);
            let box_tower = tower(bld, "box_tower");
            let reg_out = bld.conv("bbox_pred", ch, 4, 3, 1, Some(0.0), head_init);
            let ctr_out = bld.conv("centerness", ch, 1, 3, 1, Some(0.0), head_init);
            let scales = (0..levels).map(|i| bld.add(&format!("scale{}", i + 3), Tensor::scalar(F::one()))).collect();
            Heads { cls_tower, cls_out, box_tower, reg_out, ctr_out, scales }
        })
    }

    fn run_tower<F: Float>(tower: &[ConvNorm], g: &mut Graph<'_, F>, x: Var) -> Var {
        tower.iter().fold(x, |y, layer| layer.forward(g, y))
    }
}

/// The complete detector with its parameters.
#[derive(Clone, Debug)]
pub struct Network<F: Float> {
    config: BackboneConfig,
    params: ParamStore<F>,
    backbone: Backbone,
    pyramid: Pyramid,
    pose: Option<PoseBranch>,
    align: Option<Conv>,
    heads: Heads,
    levels: Vec<LevelSpec>,
}

impl<F: Float> Network<F> {
    /// Build with freshly initialized parameters drawn from `seed`.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self, NetworkError> {
        config.validate()?;
        let levels = standard_levels();
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bld = Builder::new(&mut params, &mut rng, config.norm_groups);
        let backbone = Backbone::build(&mut bld, config.variant);
        let pyramid = Pyramid::build(&mut bld, backbone.out_channels, config.pyramid_channels);
        let (pose, align) = if config.has_pose_branch() {
            let pose = PoseBranch::build(
                &mut bld,
                backbone.out_channels[0],
                config.hourglass_channels,
                config.hourglass_depth,
                config.hourglass_count,
                config.num_keypoints,
            );
            let align = bld.conv(
                "pose_align",
                config.hourglass_count * pose.feature_channels,
                config.pyramid_channels,
                1,
                1,
                Some(0.0),
                Init::Zeros,
            );
            (Some(pose), Some(align))
        } else {
            (None, None)
        };
        let heads = Heads::build(&mut bld, &config, levels.len());
        Ok(Network { config, params, backbone, pyramid, pose, align, heads, levels })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn levels(&self) -> &[LevelSpec] {
        &self.levels
    }

    /// Replace the regression ranges used for target assignment. Strides
    /// are fixed by the architecture and must stay 8..128.
    pub fn set_levels(&mut self, levels: Vec<LevelSpec>) {
        assert_eq!(levels.len(), self.levels.len(), "one range per pyramid level");
        for (a, b) in levels.iter().zip(&self.levels) {
            assert_eq!(a.stride, b.stride, "level strides are fixed");
        }
        self.levels = levels;
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Replace all parameters, checking names and shapes against this layout.
    pub fn load_params(&mut self, store: ParamStore<F>) -> Result<(), NetworkError> {
        if store.len() != self.params.len() {
            return Err(NetworkError::ConfigMismatch(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                store.len()
            )));
        }
        for ((_, name, t), (_, other, u)) in self.params.iter().zip(store.iter()) {
            if name != other || t.shape() != u.shape() {
                return Err(NetworkError::ConfigMismatch(format!("{name} {:?} vs {other} {:?}", t.shape(), u.shape())));
            }
        }
        self.params = store;
        Ok(())
    }

    /// Record the forward pass of a `[N, 3, H, W]` input on `g`.
    pub fn forward(&self, g: &mut Graph<'_, F>, x: Var) -> Result<NetworkOutputs<Var>, NetworkError> {
        let (_, c, h, w) = g.value(x).dims4();
        if c != 3 {
            return Err(NetworkError::ConfigMismatch(format!("input has {c} channels, expected 3")));
        }
        check_input_size(w as u32, h as u32)?;
        let feats = self.backbone.forward(g, x);
        let pyramid = self.pyramid.forward(g, [feats.c3, feats.c4, feats.c5]);
        let (heatmaps, pose_features, aligned) = match (&self.pose, &self.align) {
            (Some(pose), Some(align)) => {
                let out = pose.forward(g, feats.c3);
                let cat = g.concat_channels(&out.features);
                let aligned = align.forward(g, cat);
                (out.heatmaps, out.features, Some(aligned))
            }
            _ => (Vec::new(), Vec::new(), None),
        };
        let mut levels = Vec::with_capacity(pyramid.len());
        for (i, (&p, spec)) in pyramid.iter().zip(&self.levels).enumerate() {
            let cls_in = match aligned {
                Some(a) => {
                    let pooled = g.avg_pool(a, (spec.stride / 8) as usize);
                    g.add(p, pooled)
                }
                None => p,
            };
            let ct = Heads::run_tower(&self.heads.cls_tower, g, cls_in);
            let cls_logits = self.heads.cls_out.forward(g, ct);
            let bt = Heads::run_tower(&self.heads.box_tower, g, p);
            let reg_raw = self.heads.reg_out.forward(g, bt);
            let ctr_logits = self.heads.ctr_out.forward(g, bt);
            let s = g.param(self.heads.scales[i]);
            let reg = g.exp_scale(reg_raw, s);
            levels.push(LevelOutputs { cls_logits, reg_raw, reg, ctr_logits });
        }
        Ok(NetworkOutputs { levels, heatmaps, pose_features })
    }

    /// Forward pass without keeping the tape.
    pub fn predict(&self, input: Tensor<F>) -> Result<NetworkOutputs<Tensor<F>>, NetworkError> {
        let mut g = Graph::new(&self.params);
        let x = g.input(input);
        let out = self.forward(&mut g, x)?;
        Ok(out.values(&g))
    }

    /// Convert every parameter to another precision, keeping the layout.
    pub fn cast<G: Float>(&self) -> Network<G> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            pyramid: self.pyramid.clone(),
            pose: self.pose.clone(),
            align: self.align.clone(),
            heads: self.heads.clone(),
            levels: self.levels.clone(),
        }
    }
}
