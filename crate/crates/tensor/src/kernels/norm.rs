use crate::{Float, Tensor};

/// Per-(sample, group) statistics saved for the backward pass.
pub struct GroupStats<F> {
    pub mean: Vec<F>,
    pub rstd: Vec<F>,
}

pub fn group_norm_forward<F: Float>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    groups: usize,
    eps: F,
) -> (Tensor<F>, GroupStats<F>) {
    let (n, c, h, w) = x.dims4();
    assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
    assert_eq!(gamma.len(), c);
    assert_eq!(beta.len(), c);
    let cpg = c / groups;
    let hw = h * w;
    let block = cpg * hw;
    let count = F::from_usize(block).unwrap();
    let mut out = Tensor::zeros(x.shape());
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for s in 0..n {
        for gi in 0..groups {
            let off = (s * c + gi * cpg) * hw;
            let xs = &x.data()[off..off + block];
            let mu = xs.iter().copied().sum::<F>() / count;
            let var = xs.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / count;
            let r = F::one() / (var + eps).sqrt();
            mean.push(mu);
            rstd.push(r);
            let ys = &mut out.data_mut()[off..off + block];
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
                for i in ci * hw..(ci + 1) * hw {
                    ys[i] = (xs[i] - mu) * r * gm + bt;
                }
            }
        }
    }
    (out, GroupStats { mean, rstd })
}

pub struct NormGrads<F> {
    pub dx: Tensor<F>,
    pub dgamma: Tensor<F>,
    pub dbeta: Tensor<F>,
}

pub fn group_norm_backward<F: Float>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    groups: usize,
    stats: &GroupStats<F>,
    dout: &Tensor<F>,
) -> NormGrads<F> {
    let (n, c, h, w) = x.dims4();
    let cpg = c / groups;
    let hw = h * w;
    let block = cpg * hw;
    let count = F::from_usize(block).unwrap();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for s in 0..n {
        for gi in 0..groups {
            let k = s * groups + gi;
            let (mu, r) = (stats.mean[k], stats.rstd[k]);
            let off = (s * c + gi * cpg) * hw;
            let xs = &x.data()[off..off + block];
            let gs = &dout.data()[off..off + block];
            // sums of dxhat and dxhat * xhat over the group
            let mut sum_d = F::zero();
            let mut sum_dx = F::zero();
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let gm = gamma.data()[ch];
                let mut dg = F::zero();
                let mut dbt = F::zero();
                for i in ci * hw..(ci + 1) * hw {
                    let xhat = (xs[i] - mu) * r;
                    dg = dg + gs[i] * xhat;
                    dbt = dbt + gs[i];
                    let d = gs[i] * gm;
                    sum_d = sum_d + d;
                    sum_dx = sum_dx + d * xhat;
                }
                dgamma.data_mut()[ch] = dgamma.data()[ch] + dg;
                dbeta.data_mut()[ch] = dbeta.data()[ch] + dbt;
            }
            let mean_d = sum_d / count;
            let mean_dx = sum_dx / count;
            let dxs = &mut dx.data_mut()[off..off + block];
            for ci in 0..cpg {
                let gm = gamma.data()[gi * cpg + ci];
                for i in ci * hw..(ci + 1) * hw {
                    let xhat = (xs[i] - mu) * r;
                    dxs[i] = r * (gs[i] * gm - mean_d - xhat * mean_dx);
                }
            }
        }
    }
    NormGrads { dx, dgamma, dbeta }
}
