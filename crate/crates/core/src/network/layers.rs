use posedet_tensor::{Float, Graph, ParamId, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He-normal over fan-in.
    Kaiming,
    Normal(f64),
    Zeros,
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, F: Float> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: Vec<String>,
    pub norm_groups: usize,
}

impl<'a, F: Float> Builder<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, rng: &'a mut ChaCha8Rng, norm_groups: usize) -> Self {
        Builder { store, rng, prefix: Vec::new(), norm_groups }
    }

    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.into());
        let r = f(self);
        self.prefix.pop();
        r
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    fn tensor(&mut self, shape: &[usize], init: Init, fan_in: usize) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let std = match init {
            Init::Kaiming => (2.0 / fan_in as f64).sqrt(),
            Init::Normal(s) => s,
            Init::Zeros => 0.0,
        };
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                F::lit(z * std)
            })
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn add(&mut self, leaf: &str, t: Tensor<F>) -> ParamId {
        let name = self.full_name(leaf);
        self.store.add(name, t)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: Option<f64>,
        init: Init,
    ) -> Conv {
        self.scoped(name, |b| {
            let w = b.tensor(&[cout, cin, k, k], init, cin * k * k);
            let w = b.add("weight", w);
            let bias = bias.map(|v| b.add("bias", Tensor::full(&[cout], F::lit(v))));
            Conv { weight: w, bias, stride, pad: k / 2 }
        })
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> Norm {
        let groups = group_count(channels, self.norm_groups);
        self.scoped(name, |b| Norm {
            gamma: b.add("weight", Tensor::full(&[channels], F::one())),
            beta: b.add("bias", Tensor::zeros(&[channels])),
            groups,
        })
    }

    pub fn conv_norm(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, relu: bool) -> ConvNorm {
        self.scoped(name, |b| ConvNorm {
            conv: b.conv("conv", cin, cout, k, stride, None, Init::Kaiming),
            norm: b.norm("norm", cout),
            relu,
        })
    }
}

/// Largest divisor of `channels` that is at most `max_groups`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl Norm {
    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// Convolution, GroupNorm and optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvNorm {
    pub conv: Conv,
    pub norm: Norm,
    pub relu: bool,
}

impl ConvNorm {
    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let y = self.conv.forward(g, x);
        let y = self.norm.forward(g, y);
        if self.relu {
            g.relu(y)
        } else {
            y
        }
    }
}
