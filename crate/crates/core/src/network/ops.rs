//! Layer kernels with explicit forward/backward passes.
//!
//! Everything operates on a single sample in `C × H × W` layout. Backward
//! functions *accumulate* parameter gradients into the provided slices and
//! return the gradient with respect to their input.

use rand::Rng;

use crate::rng::rng_from;
use crate::tensor::Tensor3;

pub const LEAKY_SLOPE: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

/// Strided read-only matrix view for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// View of the transpose of a row-major `rows × cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.row_stride + (cols - 1) * self.col_stride < self.data.len()
    }
}

/// `C (m × n, row-major) = A (m × k) · B (k × n) + beta · C`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    assert!(a.fits(m, k) && b.fits(k, n) && c.len() >= m * n, "gemm operand out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds of all three operands were checked above and the output
    // does not alias the inputs (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &Tensor3, k: usize, pad: usize) -> Vec<f64> {
    let (c, h, w) = x.shape();
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        let plane = &x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    let sx_lo = x_lo + kx - pad;
                    let n = x_hi - x_lo;
                    row[y * w + x_lo..y * w + x_hi].copy_from_slice(&plane[sy * w + sx_lo..sy * w + sx_lo + n]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize) -> Tensor3 {
    let hw = h * w;
    let mut out = Tensor3::zeros(c, h, w);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                let plane = &mut out.data[ci * hw..(ci + 1) * hw];
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    let sx_lo = x_lo + kx - pad;
                    let dst = &mut plane[sy * w + sx_lo..sy * w + sx_lo + (x_hi - x_lo)];
                    for (d, s) in dst.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

/// Saved state of a same-padded, stride-1 convolution.
#[derive(Debug, Clone)]
pub struct ConvCache {
    in_shape: (usize, usize, usize),
    kernel: usize,
    /// im2col matrix; for 1×1 kernels this is the input itself.
    cols: Vec<f64>,
}

/// Same-padded stride-1 convolution. `weight` is `[out][in][k][k]`.
pub fn conv2d_forward(x: &Tensor3, weight: &[f64], bias: &[f64], out_ch: usize, kernel: usize) -> (Tensor3, ConvCache) {
    let (c, h, w) = x.shape();
    let hw = h * w;
    let kk = c * kernel * kernel;
    assert_eq!(weight.len(), out_ch * kk, "conv weight size");
    let cols = if kernel == 1 { x.data.clone() } else { im2col(x, kernel, kernel / 2) };
    let mut out = Tensor3::zeros(out_ch, h, w);
    for (co, &b) in bias.iter().enumerate() {
        out.data[co * hw..(co + 1) * hw].fill(b);
    }
    gemm(out_ch, kk, hw, MatRef::row_major(weight, kk), MatRef::row_major(&cols, hw), 1.0, &mut out.data);
    (
        out,
        ConvCache {
            in_shape: (c, h, w),
            kernel,
            cols,
        },
    )
}

pub fn conv2d_backward(
    grad_out: &Tensor3,
    cache: &ConvCache,
    weight: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    need_input_grad: bool,
) -> Option<Tensor3> {
    let (c, h, w) = cache.in_shape;
    let hw = h * w;
    let k = cache.kernel;
    let kk = c * k * k;
    let out_ch = grad_out.channels;
    for (co, gb) in grad_bias.iter_mut().enumerate() {
        *gb += grad_out.data[co * hw..(co + 1) * hw].iter().sum::<f64>();
    }
    gemm(
        out_ch,
        hw,
        kk,
        MatRef::row_major(&grad_out.data, hw),
        MatRef::transposed(&cache.cols, hw),
        1.0,
        grad_weight,
    );
    if !need_input_grad {
        return None;
    }
    let mut gcols = vec![0.0; kk * hw];
    gemm(kk, out_ch, hw, MatRef::transposed(weight, kk), MatRef::row_major(&grad_out.data, hw), 0.0, &mut gcols);
    if k == 1 {
        Some(Tensor3::from_vec(c, h, w, gcols))
    } else {
        Some(col2im(&gcols, c, h, w, k, k / 2))
    }
}

#[derive(Debug, Clone)]
pub struct NormCache {
    groups: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Per-sample group normalisation with a per-channel affine transform.
pub fn group_norm_forward(x: &Tensor3, gamma: &[f64], beta: &[f64], groups: usize) -> (Tensor3, NormCache) {
    let (c, h, w) = x.shape();
    let per = (c / groups) * h * w;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let src = &x.data[g * per..(g + 1) * per];
        let mean = src.iter().sum::<f64>() / per as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        for (d, s) in xhat[g * per..(g + 1) * per].iter_mut().zip(src) {
            *d = (s - mean) * is;
        }
        inv_std.push(is);
    }
    let hw = h * w;
    let mut out = Tensor3::zeros(c, h, w);
    for ch in 0..c {
        for (o, xh) in out.data[ch * hw..(ch + 1) * hw].iter_mut().zip(&xhat[ch * hw..(ch + 1) * hw]) {
            *o = gamma[ch] * xh + beta[ch];
        }
    }
    (out, NormCache { groups, xhat, inv_std })
}

pub fn group_norm_backward(
    grad_out: &Tensor3,
    cache: &NormCache,
    gamma: &[f64],
    grad_gamma: &mut [f64],
    grad_beta: &mut [f64],
) -> Tensor3 {
    let (c, h, w) = grad_out.shape();
    let hw = h * w;
    let mut dxhat = vec![0.0; grad_out.len()];
    for ch in 0..c {
        let go = &grad_out.data[ch * hw..(ch + 1) * hw];
        let xh = &cache.xhat[ch * hw..(ch + 1) * hw];
        let mut gg = 0.0;
        let mut gb = 0.0;
        for ((d, &g), &x) in dxhat[ch * hw..(ch + 1) * hw].iter_mut().zip(go).zip(xh) {
            gg += g * x;
            gb += g;
            *d = g * gamma[ch];
        }
        grad_gamma[ch] += gg;
        grad_beta[ch] += gb;
    }
    let per = (c / cache.groups) * hw;
    let mut gx = Tensor3::zeros(c, h, w);
    for g in 0..cache.groups {
        let range = g * per..(g + 1) * per;
        let d = &dxhat[range.clone()];
        let xh = &cache.xhat[range.clone()];
        let sum_d: f64 = d.iter().sum();
        let sum_dx: f64 = d.iter().zip(xh).map(|(a, b)| a * b).sum();
        let n = per as f64;
        let is = cache.inv_std[g];
        for ((o, &dv), &x) in gx.data[range].iter_mut().zip(d).zip(xh) {
            *o = is / n * (n * dv - sum_d - x * sum_dx);
        }
    }
    gx
}

pub fn leaky_relu_inplace(data: &mut [f64]) {
    for v in data {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Backward through leaky ReLU given its *output* (same sign as its input).
pub fn leaky_relu_backward_inplace(grad: &mut [f64], output: &[f64]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

pub fn sigmoid_inplace(data: &mut [f64]) {
    for v in data {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
}

pub fn avg_pool2_forward(x: &Tensor3) -> Tensor3 {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor3::zeros(c, oh, ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let s = x.get(ch, 2 * y, 2 * xx)
                    + x.get(ch, 2 * y, 2 * xx + 1)
                    + x.get(ch, 2 * y + 1, 2 * xx)
                    + x.get(ch, 2 * y + 1, 2 * xx + 1);
                out.set(ch, y, xx, 0.25 * s);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &Tensor3) -> Tensor3 {
    let (c, oh, ow) = grad_out.shape();
    let mut gx = Tensor3::zeros(c, oh * 2, ow * 2);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * grad_out.get(ch, y, x);
                gx.set(ch, 2 * y, 2 * x, g);
                gx.set(ch, 2 * y, 2 * x + 1, g);
                gx.set(ch, 2 * y + 1, 2 * x, g);
                gx.set(ch, 2 * y + 1, 2 * x + 1, g);
            }
        }
    }
    gx
}

/// Realised DropBlock mask for one feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct DropMask {
    /// 1.0 where activations survive, 0.0 where dropped (`C × H × W`).
    pub keep: Vec<f64>,
    /// Sampled block centres `(channel, y, x)`.
    pub centers: Vec<(usize, usize, usize)>,
    /// Rescale applied to survivors: `count_total / count_kept`.
    pub scale: f64,
}

impl DropMask {
    pub fn dropped_fraction(&self) -> f64 {
        self.keep.iter().filter(|&&k| k == 0.0).count() as f64 / self.keep.len() as f64
    }
}

/// Samples a DropBlock mask. Block seeds fall on positions where the whole
/// `block × block` square fits, at rate
/// `γ = p · area / (block² · valid_area)`; each seed zeroes the square whose
/// top-left corner it is. Centres are reported at `corner + block / 2`.
pub fn sample_drop_mask(shape: (usize, usize, usize), block: usize, drop_prob: f64, seed: u64) -> DropMask {
    let (c, h, w) = shape;
    assert!(block >= 1 && block <= h && block <= w, "dropblock block larger than feature map");
    let (vh, vw) = (h - block + 1, w - block + 1);
    let gamma = drop_prob * (h * w) as f64 / ((block * block) as f64 * (vh * vw) as f64);
    let mut rng = rng_from(seed);
    let mut keep = vec![1.0; c * h * w];
    let mut centers = Vec::new();
    for ch in 0..c {
        for y0 in 0..vh {
            for x0 in 0..vw {
                if rng.random::<f64>() < gamma {
                    centers.push((ch, y0 + block / 2, x0 + block / 2));
                    for y in y0..y0 + block {
                        keep[(ch * h + y) * w + x0..(ch * h + y) * w + x0 + block].fill(0.0);
                    }
                }
            }
        }
    }
    let kept = keep.iter().filter(|&&k| k != 0.0).count();
    let scale = if kept == 0 { 0.0 } else { keep.len() as f64 / kept as f64 };
    DropMask { keep, centers, scale }
}

/// Applies DropBlock in train mode. Returns `None` for the mask (and an
/// unchanged copy) when the layer is inactive.
pub fn dropblock(x: &Tensor3, block: usize, drop_prob: f64, seed: u64, train: bool) -> (Tensor3, Option<DropMask>) {
    if !train || drop_prob <= 0.0 {
        return (x.clone(), None);
    }
    let mask = sample_drop_mask(x.shape(), block, drop_prob, seed);
    let mut out = x.clone();
    apply_drop_mask(&mut out.data, &mask);
    (out, Some(mask))
}

pub fn apply_drop_mask(data: &mut [f64], mask: &DropMask) {
    for (v, k) in data.iter_mut().zip(&mask.keep) {
        *v *= k * mask.scale;
    }
}

#[derive(Debug, Clone)]
pub struct UpCache {
    input: Tensor3,
}

/// 2×2 transposed convolution with stride 2 (exact 2× upsampling).
/// `weight` is `[in][out][2][2]`.
pub fn conv_transpose2_forward(x: &Tensor3, weight: &[f64], bias: &[f64], out_ch: usize) -> (Tensor3, UpCache) {
    let (cin, h, w) = x.shape();
    let hw = h * w;
    let r = out_ch * 4;
    assert_eq!(weight.len(), cin * r, "transposed conv weight size");
    let mut yp = vec![0.0; r * hw];
    gemm(r, cin, hw, MatRef::transposed(weight, r), MatRef::row_major(&x.data, hw), 0.0, &mut yp);
    let mut out = Tensor3::zeros(out_ch, 2 * h, 2 * w);
    for co in 0..out_ch {
        for a in 0..2 {
            for b in 0..2 {
                let row = &yp[(co * 4 + a * 2 + b) * hw..][..hw];
                for i in 0..h {
                    for j in 0..w {
                        out.set(co, 2 * i + a, 2 * j + b, row[i * w + j] + bias[co]);
                    }
                }
            }
        }
    }
    (out, UpCache { input: x.clone() })
}

pub fn conv_transpose2_backward(
    grad_out: &Tensor3,
    cache: &UpCache,
    weight: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) -> Tensor3 {
    let (cin, h, w) = cache.input.shape();
    let hw = h * w;
    let out_ch = grad_out.channels;
    let r = out_ch * 4;
    let mut gyp = vec![0.0; r * hw];
    for co in 0..out_ch {
        let mut gb = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                let row = &mut gyp[(co * 4 + a * 2 + b) * hw..][..hw];
                for i in 0..h {
                    for j in 0..w {
                        let g = grad_out.get(co, 2 * i + a, 2 * j + b);
                        row[i * w + j] = g;
                        gb += g;
                    }
                }
            }
        }
        grad_bias[co] += gb;
    }
    // dW[ci, r] += Σ_p x[ci, p] · gyp[r, p]
    gemm(
        cin,
        hw,
        r,
        MatRef::row_major(&cache.input.data, hw),
        MatRef::transposed(&gyp, hw),
        1.0,
        grad_weight,
    );
    let mut gx = Tensor3::zeros(cin, h, w);
    gemm(cin, r, hw, MatRef::row_major(weight, r), MatRef::row_major(&gyp, hw), 0.0, &mut gx.data);
    gx
}

pub fn global_avg_pool(x: &Tensor3) -> Vec<f64> {
    let hw = x.plane() as f64;
    x.data.chunks(x.plane()).map(|p| p.iter().sum::<f64>() / hw).collect()
}

pub fn global_avg_pool_backward(grad: &[f64], shape: (usize, usize, usize)) -> Tensor3 {
    let (c, h, w) = shape;
    let hw = (h * w) as f64;
    let mut out = Tensor3::zeros(c, h, w);
    for (ch, g) in grad.iter().enumerate() {
        out.data[ch * h * w..(ch + 1) * h * w].fill(g / hw);
    }
    out
}

/// `y = W x + b` with `W` row-major `out × in`.
pub fn linear_forward(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + weight[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

pub fn linear_backward(grad_out: &[f64], x: &[f64], weight: &[f64], grad_weight: &mut [f64], grad_bias: &mut [f64]) -> Vec<f64> {
    let n_in = x.len();
    let mut gx = vec![0.0; n_in];
    for (o, &g) in grad_out.iter().enumerate() {
        grad_bias[o] += g;
        let row = &weight[o * n_in..(o + 1) * n_in];
        let grow = &mut grad_weight[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            grow[i] += g * x[i];
            gx[i] += g * row[i];
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor3 {
        let mut rng = rng_from(seed);
        Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    // direct-loop convolution used as an oracle for the im2col/gemm path
    fn conv_naive(x: &Tensor3, wt: &[f64], b: &[f64], co: usize, k: usize) -> Tensor3 {
        let (c, h, w) = x.shape();
        let p = (k / 2) as isize;
        let mut out = Tensor3::zeros(co, h, w);
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = b[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - p;
                                let sx = xx as isize + kx as isize - p;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                s += wt[((o * c + ci) * k + ky) * k + kx] * x.get(ci, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.set(o, y, xx, s);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, h, w) in &[(3usize, 5usize, 7usize), (1, 4, 4), (3, 1, 3)] {
            let x = random_tensor(2, h, w, 1);
            let wt = random_vec(3 * 2 * k * k, 2);
            let b = random_vec(3, 3);
            let (y, _) = conv2d_forward(&x, &wt, &b, 3, k);
            let y2 = conv_naive(&x, &wt, &b, 3, k);
            for (a, b) in y.data.iter().zip(&y2.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <grad_out, conv(x)> linear in x: check <g, W x> == <W^T g, x> (bias 0)
        let x = random_tensor(2, 6, 5, 4);
        let wt = random_vec(3 * 2 * 9, 5);
        let (y, cache) = conv2d_forward(&x, &wt, &[0.0; 3], 3, 3);
        let g = random_tensor(3, 6, 5, 6);
        let mut gw = vec![0.0; wt.len()];
        let mut gb = vec![0.0; 3];
        let gx = conv2d_backward(&g, &cache, &wt, &mut gw, &mut gb, true).unwrap();
        let lhs: f64 = g.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = gx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // and <g, y> is also linear in W: <gw, W> == <g, y>
        let rhs_w: f64 = gw.iter().zip(&wt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn transposed_conv_adjoint_and_shape() {
        let x = random_tensor(3, 2, 3, 7);
        let wt = random_vec(3 * 2 * 4, 8);
        let (y, cache) = conv_transpose2_forward(&x, &wt, &[0.0, 0.0], 2);
        assert_eq!(y.shape(), (2, 4, 6));
        let g = random_tensor(2, 4, 6, 9);
        let mut gw = vec![0.0; wt.len()];
        let mut gb = vec![0.0; 2];
        let gx = conv_transpose2_backward(&g, &cache, &wt, &mut gw, &mut gb);
        let lhs: f64 = g.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = gx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = gw.iter().zip(&wt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        assert!((lhs - rhs_w).abs() < 1e-10);
        // output pixel (co, 2i+a, 2j+b) = Σ_ci w[ci, co, a, b] x[ci, i, j]
        let manual: f64 = (0..3).map(|ci| wt[ci * 8 + 4 + 3] * x.get(ci, 1, 2)).sum();
        assert!((y.get(1, 3, 5) - manual).abs() < 1e-12);
    }

    #[test]
    fn group_norm_normalises_each_group() {
        let x = random_tensor(4, 3, 3, 10);
        let (y, _) = group_norm_forward(&x, &[1.0; 4], &[0.0; 4], 2);
        for g in 0..2 {
            let s = &y.data[g * 18..(g + 1) * 18];
            let mean: f64 = s.iter().sum::<f64>() / 18.0;
            let var: f64 = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn dropblock_identity_cases() {
        let x = random_tensor(2, 8, 8, 11);
        assert_eq!(dropblock(&x, 3, 0.0, 1, true).0, x);
        assert_eq!(dropblock(&x, 3, 0.5, 1, false).0, x);
        assert!(dropblock(&x, 3, 0.0, 1, true).1.is_none());
    }

    #[test]
    fn dropblock_rescales_survivors() {
        let x = Tensor3::filled(4, 16, 16, 1.0);
        let (y, mask) = dropblock(&x, 3, 0.2, 5, true);
        let mask = mask.unwrap();
        let kept = mask.keep.iter().filter(|&&k| k == 1.0).count();
        assert!(kept < x.len());
        let total: f64 = y.data.iter().sum();
        assert!((total - x.len() as f64).abs() < 1e-9);
    }
}
