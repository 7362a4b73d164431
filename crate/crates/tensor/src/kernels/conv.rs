//! 2-D convolution via im2col + GEMM, one sample at a time.

use crate::float::{gemm, Mat};
use crate::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        assert!(stride > 0);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        ConvGeometry { cin, h, w, kh, kw, stride, pad, ho, wo }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Column range `[lo, hi)` of output positions whose input index `o*s - p + k`
/// falls inside `[0, n)`.
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let mut lo = 0;
    while lo < out_len && (lo * stride + k) < pad {
        lo += 1;
    }
    let mut hi = out_len;
    while hi > lo && (hi - 1) * stride + k >= pad + in_len {
        hi -= 1;
    }
    (lo, hi)
}

fn im2col<F: Float>(x: &[F], g: &ConvGeometry, cols: &mut [F]) {
    let p = g.cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.ho, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(g.wo, g.w, kx, g.stride, g.pad);
                let row = &mut cols[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                row.fill(F::zero());
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let ix0 = ox0 + kx - g.pad;
                        dst[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<F: Float>(cols: &[F], g: &ConvGeometry, x: &mut [F]) {
    let p = g.cols();
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.ho, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(g.wo, g.w, kx, g.stride, g.pad);
                let row = &cols[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox0..ox1 {
                        let ix = ox * g.stride + kx - g.pad;
                        dst[ix] = dst[ix] + src[ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<F: Float>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Tensor<F> {
    let (n, cin, h, w) = x.dims4();
    let (cout, wcin, kh, kw) = weight.dims4();
    assert_eq!(cin, wcin, "conv input has {cin} channels, weight expects {wcin}");
    let g = ConvGeometry::new(cin, h, w, kh, kw, stride, pad);
    let p = g.cols();
    let rows = g.rows();
    let mut out = Tensor::zeros(&[n, cout, g.ho, g.wo]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); rows * p] };
    for s in 0..n {
        let xs = x.sample(s);
        let b = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[s * cout * p..(s + 1) * cout * p];
        gemm(
            cout,
            rows,
            p,
            F::one(),
            Mat { data: weight.data(), rs: rows, cs: 1 },
            Mat { data: b, rs: p, cs: 1 },
            F::zero(),
            dst,
        );
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(p).enumerate() {
                let bv = bias.data()[co];
                for v in chunk {
                    *v = *v + bv;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution. `dx` is only computed when requested.
pub struct ConvGrads<F> {
    pub dx: Option<Tensor<F>>,
    pub dw: Tensor<F>,
    pub db: Option<Tensor<F>>,
}

pub fn conv2d_backward<F: Float>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    has_bias: bool,
    stride: usize,
    pad: usize,
    dout: &Tensor<F>,
    need_dx: bool,
) -> ConvGrads<F> {
    let (n, cin, h, w) = x.dims4();
    let (cout, _, kh, kw) = weight.dims4();
    let g = ConvGeometry::new(cin, h, w, kh, kw, stride, pad);
    let p = g.cols();
    let rows = g.rows();
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = has_bias.then(|| Tensor::zeros(&[cout]));
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); rows * p] };
    let mut dcols = if g.is_pointwise() || !need_dx { Vec::new() } else { vec![F::zero(); rows * p] };
    for s in 0..n {
        let gs = dout.sample(s);
        if let Some(db) = db.as_mut() {
            for (co, chunk) in gs.chunks(p).enumerate() {
                let acc: F = chunk.iter().copied().sum();
                db.data_mut()[co] = db.data()[co] + acc;
            }
        }
        let xs = x.sample(s);
        let b = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        // dW[cout, rows] += g[cout, p] * cols^T[p, rows]
        gemm(
            cout,
            p,
            rows,
            F::one(),
            Mat { data: gs, rs: p, cs: 1 },
            Mat { data: b, rs: 1, cs: p },
            F::one(),
            dw.data_mut(),
        );
        if let Some(dx) = dx.as_mut() {
            let per = cin * h * w;
            let dxs = &mut dx.data_mut()[s * per..(s + 1) * per];
            // dcols[rows, p] = W^T[rows, cout] * g[cout, p]
            if g.is_pointwise() {
                gemm(
                    rows,
                    cout,
                    p,
                    F::one(),
                    Mat { data: weight.data(), rs: 1, cs: rows },
                    Mat { data: gs, rs: p, cs: 1 },
                    F::zero(),
                    dxs,
                );
            } else {
                gemm(
                    rows,
                    cout,
                    p,
                    F::one(),
                    Mat { data: weight.data(), rs: 1, cs: rows },
                    Mat { data: gs, rs: p, cs: 1 },
                    F::zero(),
                    &mut dcols,
                );
                col2im_add(&dcols, &g, dxs);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used as the reference.
    fn naive(x: &Tensor<f64>, wt: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (n, cin, h, w) = x.dims4();
        let (cout, _, kh, kw) = wt.dims4();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for s in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((s * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * wt.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out.data_mut()[((s * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], k: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| ((i as f64 * k).sin() * 3.0).round() / 4.0).collect())
    }

    #[test]
    fn matches_naive_convolution() {
        for &(h, w, k, s, p) in &[(7, 5, 3, 1, 1), (8, 6, 3, 2, 1), (5, 5, 1, 1, 0), (6, 4, 1, 2, 0), (9, 7, 3, 2, 0)] {
            let x = ramp(&[2, 3, h, w], 0.37);
            let wt = ramp(&[4, 3, k, k], 0.91);
            let b = [0.5, -0.25, 0.0, 1.0];
            let got = conv2d_forward(&x, &wt, Some(&Tensor::new(vec![4], b.to_vec())), s, p);
            let want = naive(&x, &wt, &b, s, p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> is bilinear in (x, w), so dx and dw can be checked exactly.
        for &(h, w, k, s, p) in &[(7, 5, 3, 1, 1), (8, 6, 3, 2, 1), (6, 4, 1, 1, 0)] {
            let x = ramp(&[2, 3, h, w], 0.37);
            let wt = ramp(&[4, 3, k, k], 0.91);
            let out = conv2d_forward(&x, &wt, None, s, p);
            let g = ramp(out.shape(), 0.13);
            let grads = conv2d_backward(&x, &wt, true, s, p, &g, true);
            let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
            let lhs = dot(&out, &g);
            assert!((dot(grads.dx.as_ref().unwrap(), &x) - lhs).abs() < 1e-9);
            assert!((dot(&grads.dw, &wt) - lhs).abs() < 1e-9);
            let gsum: f64 = g.data().iter().sum();
            assert!((grads.db.unwrap().data().iter().sum::<f64>() - gsum).abs() < 1e-9);
        }
    }
}
