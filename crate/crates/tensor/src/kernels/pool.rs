use crate::{Float, Tensor};

/// 2x2 max pooling with stride 2. Returns the output and, per output
/// element, the flat input index of the winning element.
pub fn max_pool2_forward<F: Float>(x: &Tensor<F>) -> (Tensor<F>, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims, got {h}x{w}");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let xd = x.data();
    let od = out.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                od[o] = xd[best];
                arg.push(best as u32);
                o += 1;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<F: Float>(x_shape: &[usize], arg: &[u32], dout: &Tensor<F>) -> Tensor<F> {
    let mut dx = Tensor::zeros(x_shape);
    let d = dx.data_mut();
    for (&i, &g) in arg.iter().zip(dout.data()) {
        d[i as usize] = d[i as usize] + g;
    }
    dx
}

/// Non-overlapping `k x k` average pooling.
pub fn avg_pool_forward<F: Float>(x: &Tensor<F>, k: usize) -> Tensor<F> {
    let (n, c, h, w) = x.dims4();
    assert!(h % k == 0 && w % k == 0, "avg_pool({k}) needs divisible dims, got {h}x{w}");
    let (ho, wo) = (h / k, w / k);
    let inv = F::one() / F::from_usize(k * k).unwrap();
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let xd = x.data();
    let od = out.data_mut();
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let dst = &mut od[plane * ho * wo..(plane + 1) * ho * wo];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let drow = &mut dst[(y / k) * wo..(y / k + 1) * wo];
            for (x, &v) in row.iter().enumerate() {
                drow[x / k] = drow[x / k] + v;
            }
        }
        for v in dst.iter_mut() {
            *v = *v * inv;
        }
    }
    out
}

pub fn avg_pool_backward<F: Float>(x_shape: &[usize], k: usize, dout: &Tensor<F>) -> Tensor<F> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (ho, wo) = (h / k, w / k);
    let inv = F::one() / F::from_usize(k * k).unwrap();
    let mut dx = Tensor::zeros(x_shape);
    let planes = x_shape[0] * x_shape[1];
    for plane in 0..planes {
        let src = &dout.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / k) * wo + x / k] * inv;
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_forward<F: Float>(x: &Tensor<F>, k: usize) -> Tensor<F> {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h * k, w * k);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * ho * wo..(plane + 1) * ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                dst[y * wo + x] = src[(y / k) * w + x / k];
            }
        }
    }
    out
}

pub fn upsample_backward<F: Float>(x_shape: &[usize], k: usize, dout: &Tensor<F>) -> Tensor<F> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (ho, wo) = (h * k, w * k);
    let mut dx = Tensor::zeros(x_shape);
    let planes = x_shape[0] * x_shape[1];
    for plane in 0..planes {
        let src = &dout.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for y in 0..ho {
            for x in 0..wo {
                dst[(y / k) * w + x / k] = dst[(y / k) * w + x / k] + src[y * wo + x];
            }
        }
    }
    dx
}
