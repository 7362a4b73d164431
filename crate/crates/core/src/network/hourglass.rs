//! Stacked hourglass pose branch attached to C3.
//!
//! Each stage emits a K-channel keypoint heatmap (supervised) and a pose
//! feature map (fed to the classification tower). Between stages the
//! features and heatmap are projected back and added to the running input,
//! so later stages refine earlier ones.

use posedet_tensor::{Float, Graph, Var};

use super::layers::{Builder, Conv, ConvNorm, Init, Norm};

/// Pre-activation bottleneck residual: norm-relu-1x1, norm-relu-3x3, norm-relu-1x1.
#[derive(Clone, Debug)]
struct Residual {
    steps: Vec<(Norm, Conv)>,
}

impl Residual {
    fn build<F: Float>(bld: &mut Builder<'_, F>, name: &str, ch: usize) -> Self {
        let mid = ch / 2;
        bld.scoped(name, |bld| Residual {
            steps: vec![
                (bld.norm("norm1", ch), bld.conv("conv1", ch, mid, 1, 1, Some(0.0), Init::Kaiming)),
                (bld.norm("norm2", mid), bld.conv("conv2", mid, mid, 3, 1, Some(0.0), Init::Kaiming)),
                (bld.norm("norm3", mid), bld.conv("conv3", mid, ch, 1, 1, Some(0.0), Init::Kaiming)),
            ],
        })
    }

    fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let mut y = x;
        for (norm, conv) in &self.steps {
            y = norm.forward(g, y);
            y = g.relu(y);
            y = conv.forward(g, y);
        }
        g.add(x, y)
    }
}

/// One recursive hourglass of a given depth.
#[derive(Clone, Debug)]
struct Hourglass {
    /// Per depth level, outermost first: (skip branch, pre-recursion, post-recursion).
    levels: Vec<(Residual, Residual, Residual)>,
    bottom: Residual,
}

impl Hourglass {
    fn build<F: Float>(bld: &mut Builder<'_, F>, depth: usize, ch: usize) -> Self {
        let levels = (0..depth)
            .map(|d| {
                bld.scoped(format!("level{d}"), |bld| {
                    (Residual::build(bld, "skip", ch), Residual::build(bld, "down", ch), Residual::build(bld, "up", ch))
                })
            })
            .collect();
        Hourglass { levels, bottom: Residual::build(bld, "bottom", ch) }
    }

    fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        self.forward_from(g, x, 0)
    }

    fn forward_from<F: Float>(&self, g: &mut Graph<'_, F>, x: Var, d: usize) -> Var {
        let (skip, down, up) = &self.levels[d];
        let upper = skip.forward(g, x);
        let low = g.max_pool2(x);
        let low = down.forward(g, low);
        let low =
            if d + 1 < self.levels.len() { self.forward_from(g, low, d + 1) } else { self.bottom.forward(g, low) };
        let low = up.forward(g, low);
        let low = g.upsample_nearest(low, 2);
        g.add(upper, low)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    hourglass: Hourglass,
    refine: Residual,
    feature: ConvNorm,
    heatmap: Conv,
    /// Projections of the features and heatmap back into the trunk; absent on the last stage.
    merge: Option<(Conv, Conv)>,
}

#[derive(Clone, Debug)]
pub struct PoseBranch {
    entry: ConvNorm,
    stages: Vec<Stage>,
    pub feature_channels: usize,
}

pub struct PoseOutputs {
    pub heatmaps: Vec<Var>,
    pub features: Vec<Var>,
}

impl PoseBranch {
    pub fn build<F: Float>(
        bld: &mut Builder<'_, F>,
        in_channels: usize,
        ch: usize,
        depth: usize,
        stacks: usize,
        keypoints: usize,
    ) -> Self {
        bld.scoped("pose", |bld| {
            let entry = bld.conv_norm("entry", in_channels, ch, 1, 1, true);
            let stages = (0..stacks)
                .map(|t| {
                    bld.scoped(format!("stage{t}"), |bld| Stage {
                        hourglass: bld.scoped("hourglass", |bld| Hourglass::build(bld, depth, ch)),
                        refine: Residual::build(bld, "refine", ch),
                        feature: bld.conv_norm("feature", ch, ch, 1, 1, true),
                        heatmap: bld.conv("heatmap", ch, keypoints, 1, 1, Some(0.0), Init::Normal(0.01)),
                        merge: (t + 1 < stacks).then(|| {
                            (
                                bld.conv("merge_feature", ch, ch, 1, 1, Some(0.0), Init::Kaiming),
                                bld.conv("merge_heatmap", keypoints, ch, 1, 1, Some(0.0), Init::Kaiming),
                            )
                        }),
                    })
                })
                .collect();
            PoseBranch { entry, stages, feature_channels: ch }
        })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, c3: Var) -> PoseOutputs {
        let mut x = self.entry.forward(g, c3);
        let mut heatmaps = Vec::with_capacity(self.stages.len());
        let mut features = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let y = stage.hourglass.forward(g, x);
            let y = stage.refine.forward(g, y);
            let feat = stage.feature.forward(g, y);
            let heat = stage.heatmap.forward(g, feat);
            if let Some((mf, mh)) = &stage.merge {
                let a = mf.forward(g, feat);
                let b = mh.forward(g, heat);
                let ab = g.add(a, b);
                x = g.add(x, ab);
            }
            heatmaps.push(heat);
            features.push(feat);
        }
        PoseOutputs { heatmaps, features }
    }
}
