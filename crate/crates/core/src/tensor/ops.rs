//! Forward and backward kernels of the primitive operations.
//!
//! Forward functions validate shapes and return fresh tensors; the matching
//! `*_backward` functions take the upstream gradient and whatever forward
//! context they need. [`super::Graph`] wires the two together.

use rayon::prelude::*;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

// Rows are handed to rayon only above this many multiply-adds.
const PAR_THRESHOLD: usize = 1 << 18;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let row = |(i, c_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let row = |(i, c_row): (usize, &mut [T])| {
        for p in 0..k {
            let a_pi = a[p * m + i];
            if a_pi == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_pi * b_pj;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let row = |(i, c_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, c_ij) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *c_ij += acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

fn expect_rank<T: Real>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(op, "rank", rank, t.rank()));
    }
    Ok(())
}

fn same_dims<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            op,
            format!("operand dims differ: {:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 1×1 convolution

pub fn conv1x1<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (ci, h, w) = input.chw()?;
    let (co, wci) = weight.matrix_dims()?;
    if wci != ci {
        return Err(Error::dim("conv1x1", "input channels", wci, ci));
    }
    expect_rank("conv1x1", bias, 1)?;
    if bias.numel() != co {
        return Err(Error::dim("conv1x1", "bias length", co, bias.numel()));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(co * hw);
    for &b in bias.data() {
        out.extend(std::iter::repeat(b).take(hw));
    }
    gemm_nn(co, ci, hw, weight.data(), input.data(), &mut out);
    Tensor::new(vec![co, h, w], out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn conv1x1_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (ci, h, w) = input.chw().expect("validated in forward");
    let co = weight.dims()[0];
    let hw = h * w;
    let mut d_in = vec![T::zero(); ci * hw];
    gemm_tn(ci, co, hw, weight.data(), grad_out.data(), &mut d_in);
    let mut d_w = vec![T::zero(); co * ci];
    gemm_nt(co, hw, ci, grad_out.data(), input.data(), &mut d_w);
    let d_b = grad_out.data().chunks(hw).map(|r| r.iter().copied().sum()).collect();
    (
        Tensor::new(vec![ci, h, w], d_in).unwrap(),
        Tensor::new(vec![co, ci], d_w).unwrap(),
        Tensor::new(vec![co], d_b).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// k×k convolution (used by the toy backbone and optional 3×3 branches)

/// Output extent of a padded strided convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

fn im2col<T: Real>(x: &[T], ci: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (Vec<T>, usize, usize) {
    let ho = conv_out_len(h, k, stride, pad);
    let wo = conv_out_len(w, k, stride, pad);
    let mut cols = vec![T::zero(); ci * k * k * ho * wo];
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], ci: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<T> {
    let mut x = vec![T::zero(); ci * h * w];
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Square-kernel convolution with zero padding.
///
/// `weight` is `(c_out, c_in, k, k)`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (ci, h, w) = input.chw()?;
    expect_rank("conv2d", weight, 4)?;
    let (co, wci, k, k2) = (weight.dims()[0], weight.dims()[1], weight.dims()[2], weight.dims()[3]);
    if k != k2 {
        return Err(Error::dim("conv2d", "kernel width", k, k2));
    }
    if wci != ci {
        return Err(Error::dim("conv2d", "input channels", wci, ci));
    }
    if bias.numel() != co {
        return Err(Error::dim("conv2d", "bias length", co, bias.numel()));
    }
    if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::shape("conv2d", format!("kernel {k} stride {stride} does not fit {h}x{w}")));
    }
    let (cols, ho, wo) = im2col(input.data(), ci, h, w, k, stride, pad);
    let hw = ho * wo;
    let mut out = Vec::with_capacity(co * hw);
    for &b in bias.data() {
        out.extend(std::iter::repeat(b).take(hw));
    }
    gemm_nn(co, ci * k * k, hw, weight.data(), &cols, &mut out);
    Tensor::new(vec![co, ho, wo], out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (ci, h, w) = input.chw().expect("validated in forward");
    let (co, k) = (weight.dims()[0], weight.dims()[2]);
    let (cols, ho, wo) = im2col(input.data(), ci, h, w, k, stride, pad);
    let hw = ho * wo;
    let kk = ci * k * k;
    let mut d_w = vec![T::zero(); co * kk];
    gemm_nt(co, hw, kk, grad_out.data(), &cols, &mut d_w);
    let d_b = grad_out.data().chunks(hw).map(|r| r.iter().copied().sum()).collect();
    let d_in = need_input_grad.then(|| {
        let mut d_cols = vec![T::zero(); kk * hw];
        gemm_tn(kk, co, hw, weight.data(), grad_out.data(), &mut d_cols);
        Tensor::new(vec![ci, h, w], col2im(&d_cols, ci, h, w, k, stride, pad, ho, wo)).unwrap()
    });
    (
        d_in,
        Tensor::new(weight.dims().to_vec(), d_w).unwrap(),
        Tensor::new(vec![co], d_b).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// Resampling

/// One output coordinate of a linear interpolation along an axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-center source coordinates: `src = (dst + 0.5) * in / out - 0.5`,
/// clamped to `[0, in - 1]`.
pub(crate) fn linear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

fn check_target(op: &'static str, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 {
        return Err(Error::dim(op, "target height", 1, 0));
    }
    if out_w == 0 {
        return Err(Error::dim(op, "target width", 1, 0));
    }
    Ok(())
}

pub fn bilinear_resize<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw()?;
    check_target("bilinear_resize", out_h, out_w)?;
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = input.channel(ch);
        for y in &ty {
            let (wy0, wy1) = (T::lit(1.0 - y.frac), T::lit(y.frac));
            let r0 = &plane[y.lo * w..(y.lo + 1) * w];
            let r1 = &plane[y.hi * w..(y.hi + 1) * w];
            for x in &tx {
                let (wx0, wx1) = (T::lit(1.0 - x.frac), T::lit(x.frac));
                let top = wx0 * r0[x.lo] + wx1 * r0[x.hi];
                let bot = wx0 * r1[x.lo] + wx1 * r1[x.hi];
                out.push(wy0 * top + wy1 * bot);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

pub fn bilinear_resize_backward<T: Real>(in_dims: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (in_dims[0], in_dims[1], in_dims[2]);
    let (_, out_h, out_w) = grad_out.chw().unwrap();
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut d_in = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let g = grad_out.channel(ch);
        let d = &mut d_in[ch * h * w..(ch + 1) * h * w];
        for (oy, y) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::lit(1.0 - y.frac), T::lit(y.frac));
            for (ox, x) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::lit(1.0 - x.frac), T::lit(x.frac));
                let gv = g[oy * out_w + ox];
                d[y.lo * w + x.lo] += wy0 * wx0 * gv;
                d[y.lo * w + x.hi] += wy0 * wx1 * gv;
                d[y.hi * w + x.lo] += wy1 * wx0 * gv;
                d[y.hi * w + x.hi] += wy1 * wx1 * gv;
            }
        }
    }
    Tensor::new(in_dims.to_vec(), d_in).unwrap()
}

/// Nearest source index: `floor(dst * in / out)`.
fn nearest_index(dst: usize, in_len: usize, out_len: usize) -> usize {
    (dst * in_len / out_len).min(in_len - 1)
}

pub fn nearest_resize<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw()?;
    check_target("nearest_resize", out_h, out_w)?;
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = input.channel(ch);
        for y in 0..out_h {
            let sy = nearest_index(y, h, out_h);
            for x in 0..out_w {
                out.push(plane[sy * w + nearest_index(x, w, out_w)]);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

pub fn nearest_resize_backward<T: Real>(in_dims: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (in_dims[0], in_dims[1], in_dims[2]);
    let (_, out_h, out_w) = grad_out.chw().unwrap();
    let mut d_in = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let g = grad_out.channel(ch);
        for y in 0..out_h {
            let sy = nearest_index(y, h, out_h);
            for x in 0..out_w {
                d_in[(ch * h + sy) * w + nearest_index(x, w, out_w)] += g[y * out_w + x];
            }
        }
    }
    Tensor::new(in_dims.to_vec(), d_in).unwrap()
}

/// 2×2 max pooling with stride 2. Odd extents keep a clipped border window,
/// so the output is `ceil(h / 2) × ceil(w / 2)`. Returns the pooled map and,
/// per output element, the flat in-plane index of the selected input (the
/// first maximal element in row-major order).
pub fn maxpool2x2<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = input.chw()?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = input.channel(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = 2 * oy * w + 2 * ox;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for x in 2 * ox..(2 * ox + 2).min(w) {
                        if plane[y * w + x] > plane[best] {
                            best = y * w + x;
                        }
                    }
                }
                out.push(plane[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
}

pub fn maxpool2x2_backward<T: Real>(in_dims: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let plane_in = in_dims[1] * in_dims[2];
    let plane_out = grad_out.numel() / in_dims[0];
    let mut d_in = vec![T::zero(); in_dims.iter().product()];
    for (i, (&g, &src)) in grad_out.data().iter().zip(argmax).enumerate() {
        let ch = i / plane_out;
        d_in[ch * plane_in + src] += g;
    }
    Tensor::new(in_dims.to_vec(), d_in).unwrap()
}

// ---------------------------------------------------------------------------
// Normalization and linear algebra

/// Per-channel softmax over all spatial positions.
pub fn softmax_spatial<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = logits.chw()?;
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane = logits.channel(ch);
        let max = plane.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(plane.iter().map(|&v| (v - max).exp()));
        let total: T = out[start..].iter().copied().sum();
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    Tensor::new(vec![c, h, w], out)
}

pub fn softmax_spatial_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let c = output.dims()[0];
    let mut d_in = Vec::with_capacity(output.numel());
    for ch in 0..c {
        let y = output.channel(ch);
        let g = grad_out.channel(ch);
        let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
        d_in.extend(y.iter().zip(g).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::new(output.dims().to_vec(), d_in).unwrap()
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, q) = a.matrix_dims()?;
    let (q2, r) = b.matrix_dims()?;
    if q != q2 {
        return Err(Error::dim("matmul", "inner dimension", q, q2));
    }
    let mut out = vec![T::zero(); p * r];
    gemm_nn(p, q, r, a.data(), b.data(), &mut out);
    Tensor::new(vec![p, r], out)
}

/// Returns `(d_a, d_b)`.
pub fn matmul_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (p, q) = a.matrix_dims().unwrap();
    let r = b.dims()[1];
    let mut d_a = vec![T::zero(); p * q];
    gemm_nt(p, r, q, grad_out.data(), b.data(), &mut d_a);
    let mut d_b = vec![T::zero(); q * r];
    gemm_tn(q, p, r, a.data(), grad_out.data(), &mut d_b);
    (Tensor::new(vec![p, q], d_a).unwrap(), Tensor::new(vec![q, r], d_b).unwrap())
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.matrix_dims()?;
    let src = a.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

// ---------------------------------------------------------------------------
// Element-wise and structural primitives

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.dims().to_vec(), data).unwrap()
}

pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
    let (_, h, w) = first.chw()?;
    let mut channels = 0;
    for p in parts {
        let (c, ph, pw) = p.chw()?;
        if ph != h {
            return Err(Error::dim("concat_channels", "height", h, ph));
        }
        if pw != w {
            return Err(Error::dim("concat_channels", "width", w, pw));
        }
        channels += c;
    }
    let mut out = Vec::with_capacity(channels * h * w);
    for p in parts {
        out.extend_from_slice(p.data());
    }
    Tensor::new(vec![channels, h, w], out)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_dims("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.dims().to_vec(), data)
}

pub fn scalar_scale<T: Real>(x: &Tensor<T>, factor: T) -> Tensor<T> {
    x.map(|v| v * factor)
}

/// `Σ_j coeffs[j] · tensors[j]`.
pub fn weighted_sum<T: Real>(coeffs: &Tensor<T>, tensors: &[&Tensor<T>]) -> Result<Tensor<T>> {
    expect_rank("weighted_sum", coeffs, 1)?;
    if coeffs.numel() != tensors.len() {
        return Err(Error::dim("weighted_sum", "coefficient count", tensors.len(), coeffs.numel()));
    }
    let first = tensors
        .first()
        .ok_or_else(|| Error::shape("weighted_sum", "no inputs"))?;
    let mut out = vec![T::zero(); first.numel()];
    for (&a, t) in coeffs.data().iter().zip(tensors) {
        same_dims("weighted_sum", first, t)?;
        for (o, &v) in out.iter_mut().zip(t.data()) {
            *o += a * v;
        }
    }
    Tensor::new(first.dims().to_vec(), out)
}

/// Mean over the spatial axes: `(c, h, w) → (c)`.
pub fn global_avg_spatial<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    let n = T::lit((h * w) as f64);
    let data = (0..c).map(|ch| x.channel(ch).iter().copied().sum::<T>() / n).collect();
    Tensor::new(vec![c], data)
}

/// Adds `v[c]` to every spatial position of channel `c`.
pub fn broadcast_add_channel<T: Real>(x: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    expect_rank("broadcast_add_channel", v, 1)?;
    if v.numel() != c {
        return Err(Error::dim("broadcast_add_channel", "channels", c, v.numel()));
    }
    let hw = h * w;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &val)| val + v.data()[i / hw])
        .collect();
    Tensor::new(vec![c, h, w], data)
}

/// `target · a / (Σa + eps)`: rescales non-negative weights to a fixed sum.
pub fn rescale_to_sum<T: Real>(a: &Tensor<T>, target: f64, eps: f64) -> Result<Tensor<T>> {
    expect_rank("rescale_to_sum", a, 1)?;
    let s = a.sum() + T::lit(eps);
    Ok(a.map(|v| T::lit(target) * v / s))
}

pub fn rescale_to_sum_backward<T: Real>(a: &Tensor<T>, target: f64, eps: f64, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = a.sum() + T::lit(eps);
    let k = T::lit(target);
    let cross: T = grad_out.data().iter().zip(a.data()).map(|(&g, &v)| g * v).sum();
    grad_out.map(|g| k * (g / s - cross / (s * s)))
}

/// Mean pixel-wise cross-entropy of `(classes, h, w)` logits against a label
/// map, skipping [`IGNORE_LABEL`]. Returns the loss and the softmax
/// probabilities needed by the backward pass.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<(T, Tensor<T>, usize)> {
    let (k, h, w) = logits.chw()?;
    if labels.len() != h * w {
        return Err(Error::dim("cross_entropy", "label count", h * w, labels.len()));
    }
    let hw = h * w;
    let mut probs = vec![T::zero(); k * hw];
    let mut total = T::zero();
    let mut valid = 0usize;
    let data = logits.data();
    for (p, &label) in labels.iter().enumerate() {
        let max = (0..k).map(|c| data[c * hw + p]).fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for c in 0..k {
            let e = (data[c * hw + p] - max).exp();
            probs[c * hw + p] = e;
            z += e;
        }
        for c in 0..k {
            probs[c * hw + p] /= z;
        }
        if label == IGNORE_LABEL {
            continue;
        }
        let label = label as usize;
        if label >= k {
            return Err(Error::shape(
                "cross_entropy",
                format!("label {label} out of range for {k} classes"),
            ));
        }
        total += z.ln() + max - data[label * hw + p];
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok((total / T::lit(valid as f64), Tensor::new(vec![k, h, w], probs)?, valid))
}

pub fn cross_entropy_backward<T: Real>(probs: &Tensor<T>, labels: &[u8], valid: usize, grad_out: T) -> Tensor<T> {
    let (k, h, w) = probs.chw().unwrap();
    let hw = h * w;
    let scale = grad_out / T::lit(valid as f64);
    let mut d = probs.data().to_vec();
    for (p, &label) in labels.iter().enumerate() {
        if label == IGNORE_LABEL {
            for c in 0..k {
                d[c * hw + p] = T::zero();
            }
            continue;
        }
        d[label as usize * hw + p] -= T::one();
        for c in 0..k {
            d[c * hw + p] *= scale;
        }
    }
    Tensor::new(vec![k, h, w], d).unwrap()
}
