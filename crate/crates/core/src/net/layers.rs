//! Forward and backward passes of the few layers the toy network uses.
//! Tensors are channel-major (`c x h x w`), one image at a time, except
//! batch normalization which needs the whole batch.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Tensor { c, h, w, data }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel concatenation.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        assert!(a.h == b.h && a.w == b.w, "concat spatial mismatch");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor { c: a.c + b.c, h: a.h, w: a.w, data }
    }

    /// Splits channels `[0, k)` and `[k, c)`.
    pub fn split(self, k: usize) -> (Tensor, Tensor) {
        let n = self.h * self.w;
        let mut data = self.data;
        let tail = data.split_off(k * n);
        (Tensor { c: k, h: self.h, w: self.w, data }, Tensor { c: self.c - k, h: self.h, w: self.w, data: tail })
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `out_ch x in_ch x 3 x 3`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Conv3x3 { in_ch, out_ch, weight: vec![0.0; out_ch * in_ch * 9], bias: vec![0.0; out_ch] }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Valid output range along one axis for kernel offset `d` in {-1, 0, 1}.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    match d {
        -1 => (1, n),
        0 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

pub fn conv_forward(conv: &Conv3x3, x: &Tensor) -> Tensor {
    debug_assert_eq!(x.c, conv.in_ch);
    let (h, w) = (x.h, x.w);
    let mut out = Tensor::zeros(conv.out_ch, h, w);
    for o in 0..conv.out_ch {
        let dst = out.plane_mut(o);
        dst.fill(conv.bias[o]);
        for i in 0..conv.in_ch {
            let src = x.plane(i);
            let k = &conv.weight[(o * conv.in_ch + i) * 9..(o * conv.in_ch + i + 1) * 9];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..3 {
                    let wv = k[ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - 1;
                    let (x0, x1) = valid_range(w, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let srow = &src[sy * w..(sy + 1) * w];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        let sx0 = (x0 as isize + dx) as usize;
                        for (d, s) in drow[x0..x1].iter_mut().zip(&srow[sx0..sx0 + (x1 - x0)]) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients into `grad` and returns the input gradient.
pub fn conv_backward(conv: &Conv3x3, x: &Tensor, dout: &Tensor, grad: &mut Conv3x3) -> Tensor {
    let (h, w) = (x.h, x.w);
    let mut dx = Tensor::zeros(conv.in_ch, h, w);
    for o in 0..conv.out_ch {
        let g = dout.plane(o);
        grad.bias[o] += g.iter().sum::<f64>();
        for i in 0..conv.in_ch {
            let src = x.plane(i);
            let base = (o * conv.in_ch + i) * 9;
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..3 {
                    let dxo = kx as isize - 1;
                    let (x0, x1) = valid_range(w, dxo);
                    let wv = conv.weight[base + ky * 3 + kx];
                    let sx0 = (x0 as isize + dxo) as usize;
                    let len = x1 - x0;
                    let mut acc = 0.0;
                    let dplane = dx.plane_mut(i);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &g[y * w + x0..y * w + x1];
                        let srow = &src[sy * w + sx0..sy * w + sx0 + len];
                        acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        if wv != 0.0 {
                            let drow = &mut dplane[sy * w + sx0..sy * w + sx0 + len];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                    grad.weight[base + ky * 3 + kx] += acc;
                }
            }
        }
    }
    dx
}

/// Max pooling with kernel 3, stride 2, padding 1 (padding never wins).
/// Returns the pooled tensor and the flat argmax index of every output.
pub fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let oh = x.h.div_ceil(2);
    let ow = x.w.div_ceil(2);
    let mut out = Tensor::zeros(x.c, oh, ow);
    let mut arg = vec![0usize; x.c * oh * ow];
    for c in 0..x.c {
        let src = x.plane(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for yy in (2 * oy).saturating_sub(1)..(2 * oy + 2).min(x.h) {
                    for xx in (2 * ox).saturating_sub(1)..(2 * ox + 2).min(x.w) {
                        let v = src[yy * x.w + xx];
                        if v > best {
                            best = v;
                            best_idx = yy * x.w + xx;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out.data[o] = best;
                arg[o] = c * x.h * x.w + best_idx;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(input_shape: (usize, usize, usize), argmax: &[usize], dout: &Tensor) -> Tensor {
    let (c, h, w) = input_shape;
    let mut dx = Tensor::zeros(c, h, w);
    for (&idx, &g) in argmax.iter().zip(&dout.data) {
        dx.data[idx] += g;
    }
    dx
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    Tensor { c: x.c, h: x.h, w: x.w, data: x.data.iter().map(|&v| v.max(0.0)).collect() }
}

/// Gradient through a ReLU given its pre-activation input.
pub fn relu_backward(pre: &Tensor, dout: &Tensor) -> Tensor {
    let data = pre.data.iter().zip(&dout.data).map(|(&p, &g)| if p > 0.0 { g } else { 0.0 }).collect();
    Tensor { c: pre.c, h: pre.h, w: pre.w, data }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_forward(x: &Tensor) -> Tensor {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample_backward(dout: &Tensor) -> Tensor {
    let (h, w) = (dout.h / 2, dout.w / 2);
    let mut dx = Tensor::zeros(dout.c, h, w);
    for c in 0..dout.c {
        let src = dout.plane(c);
        let dst = dx.plane_mut(c);
        for y in 0..dout.h {
            for x in 0..dout.w {
                dst[(y / 2) * w + x / 2] += src[y * dout.w + x];
            }
        }
    }
    dx
}

/// Per-channel statistics captured by a training-mode batch-norm pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub normalized: Vec<Tensor>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization with batch statistics (biased variance).
pub fn batchnorm_train_forward(xs: &[Tensor], gamma: &[f64], beta: &[f64], eps: f64) -> (Vec<Tensor>, BatchNormCache) {
    let ch = xs[0].c;
    let per = xs[0].h * xs[0].w;
    let count = (per * xs.len()) as f64;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let m = xs.iter().map(|x| x.plane(c).iter().sum::<f64>()).sum::<f64>() / count;
        let v = xs.iter().map(|x| x.plane(c).iter().map(|a| (a - m) * (a - m)).sum::<f64>()).sum::<f64>() / count;
        mean[c] = m;
        var[c] = v;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut normalized = Vec::with_capacity(xs.len());
    let mut outs = Vec::with_capacity(xs.len());
    for x in xs {
        let mut n = x.clone();
        let mut y = x.clone();
        for c in 0..ch {
            for (nv, yv) in n.plane_mut(c).iter_mut().zip(y.plane_mut(c)) {
                *nv = (*nv - mean[c]) * inv_std[c];
                *yv = gamma[c] * *nv + beta[c];
            }
        }
        normalized.push(n);
        outs.push(y);
    }
    (outs, BatchNormCache { normalized, inv_std, mean, var })
}

/// Inference-mode batch normalization with frozen statistics.
pub fn batchnorm_eval_forward(x: &Tensor, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Tensor {
    let mut y = x.clone();
    for c in 0..x.c {
        let inv = 1.0 / (var[c] + eps).sqrt();
        for v in y.plane_mut(c) {
            *v = gamma[c] * (*v - mean[c]) * inv + beta[c];
        }
    }
    y
}

/// Returns input gradients and accumulates `dgamma`, `dbeta`.
pub fn batchnorm_train_backward(
    cache: &BatchNormCache,
    gamma: &[f64],
    douts: &[Tensor],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<Tensor> {
    let ch = douts[0].c;
    let count = (douts[0].h * douts[0].w * douts.len()) as f64;
    let mut sum_g = vec![0.0; ch];
    let mut sum_gx = vec![0.0; ch];
    for (g, n) in douts.iter().zip(&cache.normalized) {
        for c in 0..ch {
            for (gv, nv) in g.plane(c).iter().zip(n.plane(c)) {
                sum_g[c] += gv;
                sum_gx[c] += gv * nv;
            }
        }
    }
    for c in 0..ch {
        dgamma[c] += sum_gx[c];
        dbeta[c] += sum_g[c];
    }
    douts
        .iter()
        .zip(&cache.normalized)
        .map(|(g, n)| {
            let mut dx = g.clone();
            for c in 0..ch {
                let k = gamma[c] * cache.inv_std[c] / count;
                for (d, (gv, nv)) in dx.plane_mut(c).iter_mut().zip(g.plane(c).iter().zip(n.plane(c))) {
                    *d = k * (count * gv - sum_g[c] - nv * sum_gx[c]);
                }
            }
            dx
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect())
    }

    /// Direct 9-tap evaluation with explicit bounds checks.
    fn conv_reference(conv: &Conv3x3, x: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(conv.out_ch, x.h, x.w);
        for o in 0..conv.out_ch {
            for y in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut acc = conv.bias[o];
                    for i in 0..conv.in_ch {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if sy >= 0 && sx >= 0 && sy < x.h as isize && sx < x.w as isize {
                                    acc += conv.weight[(o * conv.in_ch + i) * 9 + (ky * 3 + kx) as usize]
                                        * x.at(i, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    out.data[(o * x.h + y as usize) * x.w + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference() {
        let x = ramp(2, 5, 4);
        let mut conv = Conv3x3::zeros(2, 3);
        for (i, w) in conv.weight.iter_mut().enumerate() {
            *w = ((i * 31) % 17) as f64 / 8.0 - 1.0;
        }
        conv.bias = vec![0.1, -0.2, 0.3];
        let a = conv_forward(&conv, &x);
        let b = conv_reference(&conv, &x);
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_halves_and_routes_gradient() {
        let x = ramp(1, 4, 6);
        let (y, arg) = maxpool_forward(&x);
        assert_eq!((y.h, y.w), (2, 3));
        let dx = maxpool_backward((1, 4, 6), &arg, &Tensor::from_vec(1, 2, 3, vec![1.0; 6]));
        assert_eq!(dx.data.iter().sum::<f64>(), 6.0);
        for (o, &idx) in arg.iter().enumerate() {
            assert_eq!(x.data[idx], y.data[o]);
        }
    }

    #[test]
    fn upsample_roundtrip_sums() {
        let x = ramp(2, 2, 3);
        let y = upsample_forward(&x);
        assert_eq!((y.h, y.w), (4, 6));
        let back = upsample_backward(&y);
        for (a, b) in back.data.iter().zip(&x.data) {
            assert!((a - 4.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_normalizes_each_channel() {
        let a = ramp(2, 3, 3);
        let b = Tensor::from_vec(2, 3, 3, a.data.iter().map(|v| 2.0 * v + 0.5).collect());
        let xs = vec![a, b];
        let (ys, cache) = batchnorm_train_forward(&xs, &[1.0, 1.0], &[0.0, 0.0], 1e-5);
        for c in 0..2 {
            let m: f64 = ys.iter().map(|y| y.plane(c).iter().sum::<f64>()).sum::<f64>() / 18.0;
            assert!(m.abs() < 1e-12);
        }
        assert_eq!(cache.mean.len(), 2);
    }
}
