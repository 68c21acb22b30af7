//! Dense per-sample kernels: 5×5 same-padded convolution, ReLU, 2×2 max
//! pooling, temporal mean and fully connected layers, each with its
//! backward pass.

pub const KERNEL: usize = 5;
const PAD: usize = KERNEL / 2;

/// Channel-major `[c, h, w]` buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Row range `y` of the output such that `y + k - PAD` is a valid input row.
#[inline]
fn valid_range(k: usize, n: usize) -> (usize, usize) {
    (PAD.saturating_sub(k), (n + PAD).saturating_sub(k).min(n))
}

/// Same-padded stride-1 convolution. `weights` is `[cout, cin, 5, 5]`.
pub fn conv_forward(x: &Tensor, weights: &[f64], bias: &[f64]) -> Tensor {
    let cout = bias.len();
    let (cin, h, w) = (x.c, x.h, x.w);
    let mut out = Tensor::zeros(cout, h, w);
    let plane = h * w;
    for co in 0..cout {
        let ob = &mut out.data[co * plane..(co + 1) * plane];
        ob.fill(bias[co]);
        for ci in 0..cin {
            let xb = x.plane(ci);
            for ky in 0..KERNEL {
                let (y0, y1) = valid_range(ky, h);
                for kx in 0..KERNEL {
                    let wv = weights[((co * cin + ci) * KERNEL + ky) * KERNEL + kx];
                    let (x0, x1) = valid_range(kx, w);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let iy = y + ky - PAD;
                        let src = &xb[iy * w + x0 + kx - PAD..iy * w + x1 + kx - PAD];
                        axpy(wv, src, &mut ob[y * w + x0..y * w + x1]);
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients and returns the input gradient.
pub fn conv_backward(x: &Tensor, weights: &[f64], grad_out: &Tensor, grad_w: &mut [f64], grad_b: &mut [f64]) -> Tensor {
    let cout = grad_out.c;
    let (cin, h, w) = (x.c, x.h, x.w);
    let mut grad_in = Tensor::zeros(cin, h, w);
    let plane = h * w;
    for co in 0..cout {
        let gb = grad_out.plane(co);
        grad_b[co] += gb.iter().sum::<f64>();
        for ci in 0..cin {
            let xb = x.plane(ci);
            let gi = &mut grad_in.data[ci * plane..(ci + 1) * plane];
            for ky in 0..KERNEL {
                let (y0, y1) = valid_range(ky, h);
                for kx in 0..KERNEL {
                    let widx = ((co * cin + ci) * KERNEL + ky) * KERNEL + kx;
                    let wv = weights[widx];
                    let (x0, x1) = valid_range(kx, w);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y + ky - PAD;
                        let g = &gb[y * w + x0..y * w + x1];
                        let lo = iy * w + x0 + kx - PAD;
                        let hi = iy * w + x1 + kx - PAD;
                        acc += dot(g, &xb[lo..hi]);
                        axpy(wv, g, &mut gi[lo..hi]);
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
    grad_in
}

pub fn relu_inplace(t: &mut Tensor) {
    for v in t.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `grad` where the ReLU output was zero.
pub fn relu_backward_inplace(activated: &Tensor, grad: &mut Tensor) {
    for (g, &a) in grad.data.iter_mut().zip(&activated.data) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 stride-2 max pooling (odd trailing row/column dropped). Returns the
/// pooled tensor and, per output cell, the flat input index of its maximum.
pub fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, h2, w2);
    let mut arg = vec![0usize; x.c * h2 * w2];
    for c in 0..x.c {
        let base = c * x.h * x.w;
        for y in 0..h2 {
            for xx in 0..w2 {
                let mut best = base + 2 * y * x.w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * x.w + 2 * xx + dx;
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                let o = (c * h2 + y) * w2 + xx;
                out.data[o] = x.data[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(input_shape: (usize, usize, usize), argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let (c, h, w) = input_shape;
    let mut g = Tensor::zeros(c, h, w);
    for (&src, &go) in argmax.iter().zip(&grad_out.data) {
        g.data[src] += go;
    }
    g
}

/// Mean over the width (time) axis, flattened channel-major to `c·h`.
pub fn temporal_mean(x: &Tensor) -> Vec<f64> {
    let inv = 1.0 / x.w as f64;
    x.data.chunks_exact(x.w).map(|row| row.iter().sum::<f64>() * inv).collect()
}

pub fn temporal_mean_backward(shape: (usize, usize, usize), grad: &[f64]) -> Tensor {
    let (c, h, w) = shape;
    let inv = 1.0 / w as f64;
    let mut g = Tensor::zeros(c, h, w);
    for (row, &gv) in g.data.chunks_exact_mut(w).zip(grad) {
        row.fill(gv * inv);
    }
    g
}

/// `y = W x + b` with `W` row-major `[out, in]`.
pub fn dense_forward(x: &[f64], weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| b + dot(&weights[o * n_in..(o + 1) * n_in], x))
        .collect()
}

pub fn dense_backward(x: &[f64], weights: &[f64], grad_out: &[f64], grad_w: &mut [f64], grad_b: &mut [f64]) -> Vec<f64> {
    let n_in = x.len();
    let mut grad_in = vec![0.0; n_in];
    for (o, &g) in grad_out.iter().enumerate() {
        grad_b[o] += g;
        axpy(g, x, &mut grad_w[o * n_in..(o + 1) * n_in]);
        axpy(g, &weights[o * n_in..(o + 1) * n_in], &mut grad_in);
    }
    grad_in
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition of zero-padded cross-correlation.
    fn conv_naive(x: &Tensor, wts: &[f64], b: &[f64]) -> Tensor {
        let mut out = Tensor::zeros(b.len(), x.h, x.w);
        for co in 0..b.len() {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut s = b[co];
                    for ci in 0..x.c {
                        for ky in 0..KERNEL {
                            for kx in 0..KERNEL {
                                let iy = y as isize + ky as isize - PAD as isize;
                                let ix = xx as isize + kx as isize - PAD as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                    s += wts[((co * x.c + ci) * KERNEL + ky) * KERNEL + kx]
                                        * x.data[(ci * x.h + iy as usize) * x.w + ix as usize];
                                }
                            }
                        }
                    }
                    out.data[(co * x.h + y) * x.w + xx] = s;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive() {
        for (h, w) in [(7, 9), (3, 2), (1, 1), (6, 5)] {
            let x = Tensor { c: 2, h, w, data: pseudo(2 * h * w, 1) };
            let wts = pseudo(3 * 2 * 25, 2);
            let b = pseudo(3, 3);
            let a = conv_forward(&x, &wts, &b);
            let n = conv_naive(&x, &wts, &b);
            for (p, q) in a.data.iter().zip(&n.data) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_shapes_and_argmax() {
        let x = Tensor { c: 1, h: 5, w: 5, data: (0..25).map(|i| i as f64).collect() };
        let (p, arg) = maxpool_forward(&x);
        assert_eq!((p.h, p.w), (2, 2));
        assert_eq!(p.data, vec![6.0, 8.0, 16.0, 18.0]);
        assert_eq!(arg, vec![6, 8, 16, 18]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
