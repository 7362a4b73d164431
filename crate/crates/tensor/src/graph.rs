use crate::kernels::{conv, norm, pool};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::{Float, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<F> {
    Owned(Tensor<F>),
    Param(usize),
}

enum Op<F> {
    Input,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: norm::GroupStats<F> },
    Relu(Var),
    Add(Var, Var),
    MaxPool2 { x: Var, arg: Vec<u32> },
    AvgPool { x: Var, k: usize },
    Upsample { x: Var, k: usize },
    Concat(Vec<Var>),
    ExpScale { x: Var, s: Var },
}

struct Node<F> {
    value: Value<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Tape of a single forward computation over a borrowed parameter store.
///
/// Nodes are appended in evaluation order, so a reverse sweep is a valid
/// topological order for backpropagation.
pub struct Graph<'p, F: Float> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
}

impl<'p, F: Float> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Graph { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(ParamId(*id)),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(id.0 < self.params.len(), "parameter id out of range");
        self.nodes.push(Node { value: Value::Param(id.0), op: Op::Param(id.0), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (out, stats) =
            norm::group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups, F::lit(1e-5));
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, stats }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (out, arg) = pool::max_pool2_forward(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::MaxPool2 { x, arg }, needs)
    }

    /// Non-overlapping average pooling; `k == 1` is the identity.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        if k == 1 {
            return x;
        }
        let out = pool::avg_pool_forward(self.value(x), k);
        let needs = self.needs(x);
        self.push(out, Op::AvgPool { x, k }, needs)
    }

    pub fn upsample_nearest(&mut self, x: Var, k: usize) -> Var {
        if k == 1 {
            return x;
        }
        let out = pool::upsample_forward(self.value(x), k);
        let needs = self.needs(x);
        self.push(out, Op::Upsample { x, k }, needs)
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        if xs.len() == 1 {
            return xs[0];
        }
        let (n, _, h, w) = self.value(xs[0]).dims4();
        let chans: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let (n2, c, h2, w2) = self.value(v).dims4();
                assert_eq!((n, h, w), (n2, h2, w2), "concat spatial mismatch");
                c
            })
            .collect();
        let ctot: usize = chans.iter().sum();
        let mut data = Vec::with_capacity(n * ctot * h * w);
        for s in 0..n {
            for &v in xs {
                data.extend_from_slice(self.value(v).sample(s));
            }
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        self.push(Tensor::new(vec![n, ctot, h, w], data), Op::Concat(xs.to_vec()), needs)
    }

    /// `exp(s * x)` for a one-element scale tensor `s`.
    pub fn exp_scale(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale must hold one element");
        let sv = self.value(s).data()[0];
        let out = self.value(x).map(|v| (sv * v).exp());
        let needs = self.needs(x) || self.needs(s);
        self.push(out, Op::ExpScale { x, s }, needs)
    }

    /// Backpropagate from seed gradients (`dL/dvar` for each seed var).
    pub fn backward(&self, seeds: Vec<(Var, Tensor<F>)>) -> Gradients<F> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::new(self.params.len());
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(v).shape(), "seed gradient shape mismatch");
            accumulate(&mut grads, v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.accumulate(*id, g),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let cg = conv::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        b.is_some(),
                        *stride,
                        *pad,
                        &g,
                        self.needs(*x),
                    );
                    if let Some(dx) = cg.dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *w, cg.dw);
                    if let (Some(b), Some(db)) = (b, cg.db) {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, stats } => {
                    let ng = norm::group_norm_backward(self.value(*x), self.value(*gamma), *groups, stats, &g);
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, ng.dx);
                    }
                    accumulate(&mut grads, *gamma, ng.dgamma);
                    accumulate(&mut grads, *beta, ng.dbeta);
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(self.value(Var(i)).data()) {
                        if y <= F::zero() {
                            *d = F::zero();
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::MaxPool2 { x, arg } => {
                    let dx = pool::max_pool2_backward(self.value(*x).shape(), arg, &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::AvgPool { x, k } => {
                    let dx = pool::avg_pool_backward(self.value(*x).shape(), *k, &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample { x, k } => {
                    let dx = pool::upsample_backward(self.value(*x).shape(), *k, &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(xs) => {
                    let (n, ctot, h, w) = g.dims4();
                    let mut offset = 0;
                    let per_out = ctot * h * w;
                    for &v in xs {
                        let c = self.value(v).shape()[1];
                        if self.needs(v) {
                            let mut part = Vec::with_capacity(n * c * h * w);
                            for s in 0..n {
                                let start = s * per_out + offset * h * w;
                                part.extend_from_slice(&g.data()[start..start + c * h * w]);
                            }
                            accumulate(&mut grads, v, Tensor::new(vec![n, c, h, w], part));
                        }
                        offset += c;
                    }
                }
                Op::ExpScale { x, s } => {
                    let y = self.value(Var(i));
                    let xv = self.value(*x);
                    let sv = self.value(*s).data()[0];
                    let mut ds = F::zero();
                    let mut dx = g;
                    for ((d, &yv), &xi) in dx.data_mut().iter_mut().zip(y.data()).zip(xv.data()) {
                        let gy = *d * yv;
                        ds = ds + gy * xi;
                        *d = gy * sv;
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *s, Tensor::scalar(ds));
                }
            }
        }
        out
    }
}

fn accumulate<F: Float>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
