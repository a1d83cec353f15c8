//! Minimal layer zoo with explicit forward/backward passes.
//!
//! Everything works on a single item: feature maps are `(channels, height,
//! width)` arrays of f64. Batching is done by the caller, which accumulates
//! per-item gradients. Convolutions are stride-1 with "same" zero padding and
//! are lowered to a GEMM through im2col.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Lays out every k x k input window as one column so the convolution
/// becomes `weight_matrix (O x C*k*k) . col (C*k*k x H*W)`.
fn im2col(x: &ArrayView3<f64>, k: usize) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let pad = k / 2;
    let mut col = Array2::<f64>::zeros((c_in * k * k, h * w));
    let xs = x.as_slice().expect("input must be standard layout");
    let cs = col.as_slice_mut().expect("freshly allocated");
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let base = row * h * w;
                for y in 0..h {
                    let yy = y as isize + ky as isize - pad as isize;
                    if yy < 0 || yy >= h as isize {
                        continue; // zero padding rows stay zero
                    }
                    let lo = pad.saturating_sub(kx);
                    let hi = (w + pad - kx).min(w);
                    if lo >= hi {
                        continue;
                    }
                    let src = (c * h + yy as usize) * w + lo + kx - pad;
                    let dst = base + y * w + lo;
                    cs[dst..dst + hi - lo].copy_from_slice(&xs[src..src + hi - lo]);
                }
            }
        }
    }
    col
}

/// Scatter-add of an im2col-shaped gradient back onto the input grid.
fn col2im(col: &Array2<f64>, c_in: usize, h: usize, w: usize, k: usize) -> Array3<f64> {
    let pad = k / 2;
    let mut x = Array3::<f64>::zeros((c_in, h, w));
    let cs = col.as_slice().expect("standard layout");
    let xs = x.as_slice_mut().expect("freshly allocated");
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let base = row * h * w;
                for y in 0..h {
                    let yy = y as isize + ky as isize - pad as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let lo = pad.saturating_sub(kx);
                    let hi = (w + pad - kx).min(w);
                    if lo >= hi {
                        continue;
                    }
                    let dst = (c * h + yy as usize) * w + lo + kx - pad;
                    let src = base + y * w + lo;
                    for i in 0..hi - lo {
                        xs[dst + i] += cs[src + i];
                    }
                }
            }
        }
    }
    x
}

/// Stride-1 convolution with same padding; odd kernel sizes only.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn zeros(out_c: usize, in_c: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "only odd kernels are supported");
        Self {
            weight: Array4::zeros((out_c, in_c, k, k)),
            bias: Array1::zeros(out_c),
        }
    }

    /// Kaiming fan-in initialization: weights ~ N(0, 2 / fan_in). Biases get
    /// a small positive value so narrow ReLU stacks cannot start fully dead
    /// (an all-zero channel would sit exactly on the ReLU kink, where the
    /// gradient vanishes and training never leaves).
    pub fn kaiming(out_c: usize, in_c: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = Self::zeros(out_c, in_c, k);
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        for v in layer.weight.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v = n * std;
        }
        layer.bias.fill(0.01);
        layer
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    fn weight_matrix(&self) -> Array2<f64> {
        let (o, c, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, c * k * k))
            .expect("weights are standard layout")
            .to_owned()
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (o, c, k, _) = self.weight.dim();
        let (c_in, h, w) = x.dim();
        assert_eq!(c, c_in, "conv input channels");
        let mut out = if k == 1 {
            let xm = x
                .view()
                .into_shape_with_order((c, h * w))
                .expect("standard layout");
            self.weight_matrix().dot(&xm)
        } else {
            let col = im2col(&x.view(), k);
            self.weight_matrix().dot(&col)
        };
        for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row += b;
        }
        out.into_shape_with_order((o, h, w)).expect("standard layout")
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, x: &Array3<f64>, gout: &Array3<f64>, grad: &mut Conv2d) -> Array3<f64> {
        let (o, c, k, _) = self.weight.dim();
        let (c_in, h, w) = x.dim();
        let gm = gout
            .view()
            .into_shape_with_order((o, h * w))
            .expect("standard layout");
        let (gw, gx) = if k == 1 {
            let xm = x
                .view()
                .into_shape_with_order((c_in, h * w))
                .expect("standard layout");
            let gw = gm.dot(&xm.t());
            let gx_m = self.weight_matrix().t().dot(&gm);
            let gx = gx_m
                .into_shape_with_order((c_in, h, w))
                .expect("standard layout");
            (gw, gx)
        } else {
            let col = im2col(&x.view(), k);
            let gw = gm.dot(&col.t());
            let gcol = self.weight_matrix().t().dot(&gm);
            (gw, col2im(&gcol, c_in, h, w, k))
        };
        let gw4 = gw
            .into_shape_with_order((o, c, k, k))
            .expect("standard layout");
        grad.weight += &gw4;
        grad.bias += &gm.sum_axis(Axis(1));
        gx
    }
}

/// Fully connected layer on flat vectors; used by the latent heads.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(out_n: usize, in_n: usize) -> Self {
        Self {
            weight: Array2::zeros((out_n, in_n)),
            bias: Array1::zeros(out_n),
        }
    }

    pub fn kaiming(out_n: usize, in_n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = Self::zeros(out_n, in_n);
        let std = (2.0 / in_n as f64).sqrt();
        for v in layer.weight.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v = n * std;
        }
        layer.bias.fill(0.01);
        layer
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    pub fn backward(&self, x: &Array1<f64>, gout: &Array1<f64>, grad: &mut Linear) -> Array1<f64> {
        for (i, &g) in gout.iter().enumerate() {
            let mut row = grad.weight.row_mut(i);
            row.scaled_add(g, &x.view());
        }
        grad.bias += gout;
        self.weight.t().dot(gout)
    }
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.map(|&v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(x: &Array3<f64>, gout: &Array3<f64>) -> Array3<f64> {
    let mut g = gout.clone();
    g.zip_mut_with(x, |g, &x| {
        if x <= 0.0 {
            *g = 0.0;
        }
    });
    g
}

/// 2x2 max pooling with stride 2. Returns the pooled map and the index of the
/// winner inside each window (`dy * 2 + dx`); ties go to scan order so the
/// backward pass is deterministic.
pub fn max_pool2(x: &Array3<f64>) -> (Array3<f64>, Array3<u8>) {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array3::zeros((c, ho, wo));
    let mut idx = Array3::zeros((c, ho, wo));
    for ci in 0..c {
        for y in 0..ho {
            for xq in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0u8;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = x[[ci, 2 * y + dy, 2 * xq + dx]];
                        if v > best {
                            best = v;
                            best_i = (dy * 2 + dx) as u8;
                        }
                    }
                }
                out[[ci, y, xq]] = best;
                idx[[ci, y, xq]] = best_i;
            }
        }
    }
    (out, idx)
}

pub fn max_pool2_backward(idx: &Array3<u8>, gout: &Array3<f64>) -> Array3<f64> {
    let (c, ho, wo) = gout.dim();
    let mut gx = Array3::zeros((c, ho * 2, wo * 2));
    for ci in 0..c {
        for y in 0..ho {
            for xq in 0..wo {
                let i = idx[[ci, y, xq]] as usize;
                gx[[ci, 2 * y + i / 2, 2 * xq + i % 2]] = gout[[ci, y, xq]];
            }
        }
    }
    gx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for y in 0..h {
            for xq in 0..w {
                let v = x[[ci, y, xq]];
                out[[ci, 2 * y, 2 * xq]] = v;
                out[[ci, 2 * y, 2 * xq + 1]] = v;
                out[[ci, 2 * y + 1, 2 * xq]] = v;
                out[[ci, 2 * y + 1, 2 * xq + 1]] = v;
            }
        }
    }
    out
}

pub fn upsample2_backward(gout: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = gout.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for xq in 0..w {
                gx[[ci, y, xq]] = gout[[ci, 2 * y, 2 * xq]]
                    + gout[[ci, 2 * y, 2 * xq + 1]]
                    + gout[[ci, 2 * y + 1, 2 * xq]]
                    + gout[[ci, 2 * y + 1, 2 * xq + 1]];
            }
        }
    }
    gx
}

pub fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial shapes")
}

pub fn split_channels(g: &Array3<f64>, first: usize) -> (Array3<f64>, Array3<f64>) {
    let a = g.slice(ndarray::s![..first, .., ..]).to_owned();
    let b = g.slice(ndarray::s![first.., .., ..]).to_owned();
    (a, b)
}

/// Spatial mean per channel.
pub fn global_avg_pool(x: &Array3<f64>) -> Array1<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array1::zeros(c);
    for ci in 0..c {
        out[ci] = x.index_axis(Axis(0), ci).sum() / (h * w) as f64;
    }
    out
}

pub fn global_avg_pool_backward(gout: &Array1<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = gout.len();
    let mut gx = Array3::zeros((c, h, w));
    for ci in 0..c {
        gx.index_axis_mut(Axis(0), ci).fill(gout[ci] / (h * w) as f64);
    }
    gx
}

pub fn sigmoid(x: &Array3<f64>) -> Array3<f64> {
    x.map(|&v| sigmoid_scalar(v))
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Backward through the sigmoid given its *output* y: g * y * (1 - y).
pub fn sigmoid_backward(y: &Array3<f64>, gout: &Array3<f64>) -> Array3<f64> {
    let mut g = gout.clone();
    g.zip_mut_with(y, |g, &y| *g *= y * (1.0 - y));
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, Stream};
    use ndarray::Array;

    fn rng(tag: u64) -> ChaCha8Rng {
        derive_rng(99, Stream::WeightInit, tag, 0)
    }

    fn random_map(c: usize, h: usize, w: usize, tag: u64) -> Array3<f64> {
        let mut r = rng(tag);
        Array::from_shape_fn((c, h, w), |_| r.sample::<f64, _>(StandardNormal))
    }

    /// Direct nested-loop convolution used as an oracle for the GEMM path.
    fn conv_naive(layer: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (o, c, k, _) = layer.weight.dim();
        let (_, h, w) = x.dim();
        let pad = k as isize / 2;
        let mut out = Array3::zeros((o, h, w));
        for oi in 0..o {
            for y in 0..h {
                for xq in 0..w {
                    let mut acc = layer.bias[oi];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let yy = y as isize + ky as isize - pad;
                                let xx = xq as isize + kx as isize - pad;
                                if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                    acc += layer.weight[[oi, ci, ky, kx]]
                                        * x[[ci, yy as usize, xx as usize]];
                                }
                            }
                        }
                    }
                    out[[oi, y, xq]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_oracle() {
        for (cin, cout, k, h, w) in [(1, 4, 3, 6, 8), (3, 2, 3, 5, 5), (4, 3, 1, 4, 6)] {
            let layer = Conv2d::kaiming(cout, cin, k, &mut rng(k as u64));
            let x = random_map(cin, h, w, 7 + k as u64);
            let got = layer.forward(&x);
            let want = conv_naive(&layer, &x);
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut layer = Conv2d::kaiming(2, 3, 3, &mut rng(1));
        let x = random_map(3, 4, 4, 2);
        // scalar objective: sum of outputs squared / 2
        let loss = |l: &Conv2d, x: &Array3<f64>| -> f64 {
            l.forward(x).iter().map(|v| 0.5 * v * v).sum()
        };
        let y = layer.forward(&x);
        let mut grad = Conv2d::zeros(2, 3, 3);
        let gx = layer.backward(&x, &y, &mut grad);

        let eps = 1e-6;
        // weight gradient
        for &(o, c, ky, kx) in &[(0, 0, 0, 0), (1, 2, 1, 2), (0, 1, 2, 1)] {
            let orig = layer.weight[[o, c, ky, kx]];
            layer.weight[[o, c, ky, kx]] = orig + eps;
            let lp = loss(&layer, &x);
            layer.weight[[o, c, ky, kx]] = orig - eps;
            let lm = loss(&layer, &x);
            layer.weight[[o, c, ky, kx]] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = grad.weight[[o, c, ky, kx]];
            assert!((fd - an).abs() / fd.abs().max(1.0) < 1e-6, "{fd} vs {an}");
        }
        // input gradient
        let mut xp = x.clone();
        for &(c, y0, x0) in &[(0, 0, 0), (2, 3, 1), (1, 2, 2)] {
            let orig = xp[[c, y0, x0]];
            xp[[c, y0, x0]] = orig + eps;
            let lp = loss(&layer, &xp);
            xp[[c, y0, x0]] = orig - eps;
            let lm = loss(&layer, &xp);
            xp[[c, y0, x0]] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = gx[[c, y0, x0]];
            assert!((fd - an).abs() / fd.abs().max(1.0) < 1e-6, "{fd} vs {an}");
        }
    }

    #[test]
    fn pool_upsample_roundtrip_shapes() {
        let x = random_map(3, 8, 6, 5);
        let (p, idx) = max_pool2(&x);
        assert_eq!(p.dim(), (3, 4, 3));
        let g = max_pool2_backward(&idx, &p);
        assert_eq!(g.dim(), x.dim());
        // every window's gradient lands on its argmax
        let up = upsample2(&p);
        assert_eq!(up.dim(), (3, 8, 6));
        let down = upsample2_backward(&up);
        for (a, b) in down.iter().zip(p.iter()) {
            assert!((a - 4.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_backward_routes_to_argmax() {
        let mut x = Array3::zeros((1, 2, 2));
        x[[0, 1, 0]] = 5.0;
        let (p, idx) = max_pool2(&x);
        assert_eq!(p[[0, 0, 0]], 5.0);
        let mut g = Array3::zeros((1, 1, 1));
        g[[0, 0, 0]] = 2.0;
        let gx = max_pool2_backward(&idx, &g);
        assert_eq!(gx[[0, 1, 0]], 2.0);
        assert_eq!(gx.sum(), 2.0);
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let mut layer = Linear::kaiming(3, 5, &mut rng(11));
        let mut r = rng(12);
        let x = Array1::from_shape_fn(5, |_| r.sample::<f64, _>(StandardNormal));
        let loss = |l: &Linear, x: &Array1<f64>| -> f64 {
            l.forward(x).iter().map(|v| 0.5 * v * v).sum()
        };
        let y = layer.forward(&x);
        let mut grad = Linear::zeros(3, 5);
        let gx = layer.backward(&x, &y, &mut grad);
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..5 {
                let orig = layer.weight[[i, j]];
                layer.weight[[i, j]] = orig + eps;
                let lp = loss(&layer, &x);
                layer.weight[[i, j]] = orig - eps;
                let lm = loss(&layer, &x);
                layer.weight[[i, j]] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - grad.weight[[i, j]]).abs() < 1e-6);
            }
        }
        let mut xp = x.clone();
        for j in 0..5 {
            let orig = xp[j];
            xp[j] = orig + eps;
            let lp = loss(&layer, &xp);
            xp[j] = orig - eps;
            let lm = loss(&layer, &xp);
            xp[j] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - gx[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert!(sigmoid_scalar(-800.0) >= 0.0);
        assert!(sigmoid_scalar(800.0) <= 1.0);
        assert!((sigmoid_scalar(0.0) - 0.5).abs() < 1e-15);
    }
}
