//! Backbones producing C3, C4 and C5 (strides 8, 16, 32).

use posedet_tensor::{Float, Graph, Var};

use super::config::BackboneVariant;
use super::layers::{Builder, ConvNorm};

/// Residual block with an optional projection shortcut.
#[derive(Clone, Debug)]
enum Block {
    /// Two 3x3 convolutions.
    Basic { a: ConvNorm, b: ConvNorm, shortcut: Option<ConvNorm> },
    /// 1x1 reduce, strided 3x3, 1x1 expand.
    Bottleneck { a: ConvNorm, b: ConvNorm, c: ConvNorm, shortcut: Option<ConvNorm> },
}

impl Block {
    fn basic<F: Float>(bld: &mut Builder<'_, F>, cin: usize, cout: usize, stride: usize) -> Self {
        Block::Basic {
            a: bld.conv_norm("conv1", cin, cout, 3, stride, true),
            b: bld.conv_norm("conv2", cout, cout, 3, 1, false),
            shortcut: (stride != 1 || cin != cout).then(|| bld.conv_norm("downsample", cin, cout, 1, stride, false)),
        }
    }

    fn bottleneck<F: Float>(bld: &mut Builder<'_, F>, cin: usize, planes: usize, stride: usize) -> Self {
        let cout = planes * 4;
        Block::Bottleneck {
            a: bld.conv_norm("conv1", cin, planes, 1, 1, true),
            b: bld.conv_norm("conv2", planes, planes, 3, stride, true),
            c: bld.conv_norm("conv3", planes, cout, 1, 1, false),
            shortcut: (stride != 1 || cin != cout).then(|| bld.conv_norm("downsample", cin, cout, 1, stride, false)),
        }
    }

    fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let (y, shortcut) = match self {
            Block::Basic { a, b, shortcut } => {
                let y = a.forward(g, x);
                (b.forward(g, y), shortcut)
            }
            Block::Bottleneck { a, b, c, shortcut } => {
                let y = a.forward(g, x);
                let y = b.forward(g, y);
                (c.forward(g, y), shortcut)
            }
        };
        let skip = match shortcut {
            Some(s) => s.forward(g, x),
            None => x,
        };
        let sum = g.add(y, skip);
        g.relu(sum)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stem: ConvNorm,
    stem_pool: bool,
    /// Stages producing C2..C5.
    stages: Vec<Vec<Block>>,
    /// Channel counts of C3, C4, C5.
    pub out_channels: [usize; 3],
}

pub struct BackboneFeatures {
    pub c3: Var,
    pub c4: Var,
    pub c5: Var,
}

impl Backbone {
    pub fn build<F: Float>(bld: &mut Builder<'_, F>, variant: BackboneVariant) -> Self {
        bld.scoped("backbone", |bld| match variant {
            BackboneVariant::Tiny => {
                // C1 at stride 2, then four stride-2 residual stages
                let stem = bld.conv_norm("stem", 3, 16, 3, 2, true);
                let widths = [16, 32, 64, 128];
                let mut cin = 16;
                let stages = widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let block = bld.scoped(format!("layer{}", i + 1), |bld| {
                            bld.scoped("0", |bld| Block::basic(bld, cin, w, 2))
                        });
                        cin = w;
                        vec![block]
                    })
                    .collect();
                Backbone { stem, stem_pool: false, stages, out_channels: [32, 64, 128] }
            }
            BackboneVariant::Resnet50 | BackboneVariant::Resnet101 => {
                let depths = if variant == BackboneVariant::Resnet50 { [3, 4, 6, 3] } else { [3, 4, 23, 3] };
                let stem = bld.conv_norm("stem", 3, 64, 7, 2, true);
                let mut cin = 64;
                let stages = depths
                    .iter()
                    .enumerate()
                    .map(|(i, &n)| {
                        let planes = 64 << i;
                        bld.scoped(format!("layer{}", i + 1), |bld| {
                            (0..n)
                                .map(|j| {
                                    let stride = if j == 0 && i > 0 { 2 } else { 1 };
                                    let block =
                                        bld.scoped(j.to_string(), |bld| Block::bottleneck(bld, cin, planes, stride));
                                    cin = planes * 4;
                                    block
                                })
                                .collect()
                        })
                    })
                    .collect();
                Backbone { stem, stem_pool: true, stages, out_channels: [512, 1024, 2048] }
            }
        })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> BackboneFeatures {
        let mut y = self.stem.forward(g, x);
        if self.stem_pool {
            y = g.max_pool2(y);
        }
        let mut feats = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                y = block.forward(g, y);
            }
            feats.push(y);
        }
        BackboneFeatures { c3: feats[1], c4: feats[2], c5: feats[3] }
    }
}
