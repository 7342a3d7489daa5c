//! Forward and backward kernels on plain tensors.
//!
//! These are the pure building blocks behind [`Graph`](super::Graph) ops and
//! can also be called directly when no gradients are needed.

use rayon::prelude::*;

use super::{parallel_enabled, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Geometry of one 2D convolution, derived from input and kernel shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, kernel: Shape, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        if input.c != kernel.c {
            return Err(Error::ShapeMismatch {
                op: "conv2d (input channels vs kernel in_c)",
                left: input,
                right: kernel,
            });
        }
        if input.h + 2 * pad < kernel.h || input.w + 2 * pad < kernel.w {
            return Err(Error::ShapeMismatch {
                op: "conv2d (padded input smaller than kernel)",
                left: input,
                right: kernel,
            });
        }
        let oh = (input.h + 2 * pad - kernel.h) / stride + 1;
        let ow = (input.w + 2 * pad - kernel.w) / stride + 1;
        Ok(ConvGeom {
            in_c: input.c,
            out_c: kernel.n,
            kh: kernel.h,
            kw: kernel.w,
            stride,
            pad,
            h: input.h,
            w: input.w,
            oh,
            ow,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` for which kernel column `kx` lands inside the input row.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        valid_range(self.ow, self.w, self.stride, self.pad, kx)
    }

    #[inline]
    fn valid_rows(&self, ky: usize) -> (usize, usize) {
        valid_range(self.oh, self.h, self.stride, self.pad, ky)
    }
}

#[inline]
fn valid_range(out: usize, input: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < input
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if input + pad > k {
        ((input + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn for_each_item<T, F>(out: &mut [T], item_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if item_len == 0 {
        return;
    }
    if parallel_enabled() {
        out.par_chunks_mut(item_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    } else {
        out.chunks_mut(item_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x_item: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.in_c {
        let x_plane = &x_item[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                dst.fill(T::zero());
                let (y0, y1) = g.valid_rows(ky);
                let (x0, x1) = g.valid_cols(kx);
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src_row = &x_plane[iy * g.w..(iy + 1) * g.w];
                    for ox in x0..x1 {
                        dst[oy * g.ow + ox] = src_row[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], gx_item: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.in_c {
        let gx_plane = &mut gx_item[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (y0, y1) = g.valid_rows(ky);
                let (x0, x1) = g.valid_cols(kx);
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst_row = &mut gx_plane[iy * g.w..(iy + 1) * g.w];
                    for ox in x0..x1 {
                        dst_row[ox * g.stride + kx - g.pad] =
                            dst_row[ox * g.stride + kx - g.pad] + src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

/// Direct convolution of one sequence item.
///
/// Each output element accumulates `x * w` over `(ci, ky, kx)` in
/// lexicographic order starting from zero, then adds the bias.
fn conv_direct_item<T: Scalar>(g: &ConvGeom, x_item: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
    let plane = g.out_plane();
    for co in 0..g.out_c {
        let o_plane = &mut out[co * plane..(co + 1) * plane];
        o_plane.fill(T::zero());
        for ci in 0..g.in_c {
            let x_plane = &x_item[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (y0, y1) = g.valid_rows(ky);
                for kx in 0..g.kw {
                    let wv = weight[((co * g.in_c + ci) * g.kh + ky) * g.kw + kx];
                    let (x0, x1) = g.valid_cols(kx);
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let src = &x_plane[iy * g.w..(iy + 1) * g.w];
                        let dst = &mut o_plane[oy * g.ow + x0..oy * g.ow + x1];
                        if g.stride == 1 {
                            let src = &src[x0 + kx - g.pad..x1 + kx - g.pad];
                            for (o, &xv) in dst.iter_mut().zip(src) {
                                *o = *o + xv * wv;
                            }
                        } else {
                            for (j, o) in dst.iter_mut().enumerate() {
                                *o = *o + src[(x0 + j) * g.stride + kx - g.pad] * wv;
                            }
                        }
                    }
                }
            }
        }
        let b = bias[co];
        for o in o_plane.iter_mut() {
            *o = *o + b;
        }
    }
}

fn conv_gemm_item<T: Scalar>(g: &ConvGeom, x_item: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
    let plane = g.out_plane();
    let k = g.patch_len();
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        x_item
    } else {
        let mut buf = vec![T::zero(); k * plane];
        im2col(g, x_item, &mut buf);
        owned = buf;
        &owned
    };
    for (co, o_plane) in out.chunks_mut(plane).enumerate() {
        o_plane.fill(bias[co]);
    }
    T::gemm(
        g.out_c,
        k,
        plane,
        T::one(),
        weight,
        (k as isize, 1),
        cols,
        (plane as isize, 1),
        T::one(),
        out,
        (plane as isize, 1),
    );
}

/// 2D cross-correlation. `kernel` is `(out_c, in_c, kh, kw)`, `bias` holds `out_c` values.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad)?;
    if bias.numel() != g.out_c {
        return Err(Error::ShapeMismatch {
            op: "conv2d (bias vs kernel out_c)",
            left: bias.shape(),
            right: kernel.shape(),
        });
    }
    let s = input.shape();
    let out_shape = Shape::new(s.n, g.out_c, g.oh, g.ow);
    let mut out = Tensor::zeros(out_shape);
    let in_len = s.item_len();
    let x = input.data();
    let (w, b) = (kernel.data(), bias.data());
    for_each_item(out.data_mut(), out_shape.item_len(), |i, o| {
        let xi = &x[i * in_len..(i + 1) * in_len];
        if T::GEMM_FORWARD {
            conv_gemm_item(&g, xi, w, b, o);
        } else {
            conv_direct_item(&g, xi, w, b, o);
        }
    });
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of `conv2d` given the upstream gradient `grad_out`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad)?;
    let s = input.shape();
    let plane = g.out_plane();
    let k = g.patch_len();
    let go = grad_out.data();
    let go_len = g.out_c * plane;
    let x = input.data();
    let in_len = s.item_len();

    // Per-item kernel gradients, summed afterwards in item order so the result
    // does not depend on scheduling.
    let per_item = |i: usize| -> (Vec<T>, Option<Vec<T>>) {
        let xi = &x[i * in_len..(i + 1) * in_len];
        let gi = &go[i * go_len..(i + 1) * go_len];
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            xi
        } else {
            let mut buf = vec![T::zero(); k * plane];
            im2col(&g, xi, &mut buf);
            owned = buf;
            &owned
        };
        let mut gw = vec![T::zero(); g.out_c * k];
        T::gemm(
            g.out_c,
            plane,
            k,
            T::one(),
            gi,
            (plane as isize, 1),
            cols,
            (1, plane as isize),
            T::zero(),
            &mut gw,
            (k as isize, 1),
        );
        let gx = need_input.then(|| {
            let mut gcols = vec![T::zero(); k * plane];
            T::gemm(
                k,
                g.out_c,
                plane,
                T::one(),
                kernel.data(),
                (1, k as isize),
                gi,
                (plane as isize, 1),
                T::zero(),
                &mut gcols,
                (plane as isize, 1),
            );
            if g.is_pointwise() {
                gcols
            } else {
                let mut gx = vec![T::zero(); in_len];
                col2im_add(&g, &gcols, &mut gx);
                gx
            }
        });
        (gw, gx)
    };

    let parts: Vec<(Vec<T>, Option<Vec<T>>)> = if parallel_enabled() {
        (0..s.n).into_par_iter().map(per_item).collect()
    } else {
        (0..s.n).map(per_item).collect()
    };

    let mut gw = vec![T::zero(); g.out_c * k];
    let mut gx = need_input.then(|| Vec::with_capacity(s.numel()));
    for (pw, px) in parts {
        for (a, b) in gw.iter_mut().zip(pw) {
            *a = *a + b;
        }
        if let (Some(gx), Some(px)) = (gx.as_mut(), px) {
            gx.extend(px);
        }
    }
    let mut gb = vec![T::zero(); g.out_c];
    for item in go.chunks(go_len) {
        for (co, p) in item.chunks(plane).enumerate() {
            gb[co] = gb[co] + p.iter().copied().sum::<T>();
        }
    }
    Ok(ConvGrads {
        input: gx.map(|d| Tensor::from_vec(s, d)).transpose()?,
        kernel: Tensor::from_vec(kernel.shape(), gw)?,
        bias: Tensor::from_vec(Shape::new(1, g.out_c, 1, 1), gb)?,
    })
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { slope * v })
}

/// Sum that depends only on the multiset of `terms`, not on their order.
///
/// Reductions over the sequence axis go through this so that permuting the
/// sequence permutes results bit-for-bit.
pub fn order_free_sum<T: Scalar>(terms: &mut [T]) -> T {
    terms.sort_unstable_by(|a, b| {
        a.partial_cmp(b)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.to_bits_u64().cmp(&b.to_bits_u64()))
    });
    terms.iter().fold(T::zero(), |acc, &t| acc + t)
}

/// Softmax along `axis` (0..4) with max subtraction.
pub fn softmax_along<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let dims = x.shape().dims();
    let len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut terms = Vec::with_capacity(len);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(data[idx(j)]);
            }
            terms.clear();
            for j in 0..len {
                let e = (data[idx(j)] - max).exp();
                data[idx(j)] = e;
                terms.push(e);
            }
            let sum = order_free_sum(&mut terms);
            for j in 0..len {
                data[idx(j)] = data[idx(j)] / sum;
            }
        }
    }
    out
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, gy: &[T], axis: usize) -> Vec<T> {
    let dims = y.shape().dims();
    let len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let yd = y.data();
    let mut gx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                let k = base + j * inner;
                dot = dot + gy[k] * yd[k];
            }
            for j in 0..len {
                let k = base + j * inner;
                gx[k] = yd[k] * (gy[k] - dot);
            }
        }
    }
    gx
}

/// Normalized activations and per-(item, group) inverse std, saved for backward.
pub struct GroupNormStats<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn group_norm<T: Scalar>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, GroupNormStats<T>)> {
    let s = x.shape();
    if groups == 0 || s.c % groups != 0 {
        return Err(Error::invalid(format!(
            "group_norm: {} channels are not divisible into {groups} groups",
            s.c
        )));
    }
    if gamma.len() != s.c || beta.len() != s.c {
        return Err(Error::invalid(format!(
            "group_norm: affine parameters have {} / {} entries for {} channels",
            gamma.len(),
            beta.len(),
            s.c
        )));
    }
    let cg = s.c / groups;
    let plane = s.plane_len();
    let glen = cg * plane;
    let m = T::from_f64(glen as f64);
    let mut xhat = vec![T::zero(); s.numel()];
    let mut rstd = Vec::with_capacity(s.n * groups);
    let mut out = vec![T::zero(); s.numel()];
    for (gi, chunk) in x.data().chunks(glen).enumerate() {
        let mean = chunk.iter().copied().sum::<T>() / m;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        let c0 = (gi % groups) * cg;
        let base = gi * glen;
        for (j, &v) in chunk.iter().enumerate() {
            let c = c0 + j / plane;
            let xh = (v - mean) * r;
            xhat[base + j] = xh;
            out[base + j] = gamma[c] * xh + beta[c];
        }
    }
    Ok((Tensor::from_vec(s, out)?, GroupNormStats { xhat, rstd }))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn group_norm_backward<T: Scalar>(
    shape: Shape,
    groups: usize,
    gamma: &[T],
    stats: &GroupNormStats<T>,
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = shape.c / groups;
    let plane = shape.plane_len();
    let glen = cg * plane;
    let m = T::from_f64(glen as f64);
    let mut gx = vec![T::zero(); shape.numel()];
    let mut ggamma = vec![T::zero(); shape.c];
    let mut gbeta = vec![T::zero(); shape.c];
    for gi in 0..shape.n * groups {
        let c0 = (gi % groups) * cg;
        let base = gi * glen;
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for j in 0..glen {
            let c = c0 + j / plane;
            let g = gy[base + j];
            let xh = stats.xhat[base + j];
            ggamma[c] = ggamma[c] + g * xh;
            gbeta[c] = gbeta[c] + g;
            let d = g * gamma[c];
            sum_d = sum_d + d;
            sum_dx = sum_dx + d * xh;
        }
        let r = stats.rstd[gi];
        for j in 0..glen {
            let c = c0 + j / plane;
            let d = gy[base + j] * gamma[c];
            let xh = stats.xhat[base + j];
            gx[base + j] = r / m * (m * d - sum_d - xh * sum_dx);
        }
    }
    (gx, ggamma, gbeta)
}

pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::invalid(format!(
            "avg_pool2 needs even spatial dims, got {}x{}",
            s.h, s.w
        )));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let quarter = T::from_f64(0.25);
    let d = x.data();
    let mut out = Vec::with_capacity(s.numel() / 4);
    for p in 0..s.n * s.c {
        let src = &d[p * s.h * s.w..];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * s.w + 2 * xx;
                out.push((src[i] + src[i + 1] + src[i + s.w] + src[i + s.w + 1]) * quarter);
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, oh, ow), out)
}

pub fn avg_pool2_backward<T: Scalar>(in_shape: Shape, gy: &[T]) -> Vec<T> {
    let (oh, ow) = (in_shape.h / 2, in_shape.w / 2);
    let quarter = T::from_f64(0.25);
    let mut gx = vec![T::zero(); in_shape.numel()];
    for p in 0..in_shape.n * in_shape.c {
        for y in 0..in_shape.h {
            for x in 0..in_shape.w {
                gx[(p * in_shape.h + y) * in_shape.w + x] =
                    gy[(p * oh + y / 2) * ow + x / 2] * quarter;
            }
        }
    }
    gx
}

pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let out_shape = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let d = x.data();
    Tensor::from_fn(out_shape, |n, c, y, xx| {
        d[((n * s.c + c) * s.h + y / 2) * s.w + xx / 2]
    })
}

pub fn upsample2_backward<T: Scalar>(in_shape: Shape, gy: &[T]) -> Vec<T> {
    let (uh, uw) = (in_shape.h * 2, in_shape.w * 2);
    let mut gx = vec![T::zero(); in_shape.numel()];
    for p in 0..in_shape.n * in_shape.c {
        for y in 0..uh {
            for x in 0..uw {
                let o = (p * in_shape.h + y / 2) * in_shape.w + x / 2;
                gx[o] = gx[o] + gy[(p * uh + y) * uw + x];
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for out in 1..6 {
            for input in 1..8 {
                for stride in 1..3 {
                    for pad in 0..3 {
                        for k in 0..4 {
                            let (lo, hi) = valid_range(out, input, stride, pad, k);
                            for o in 0..out {
                                let pos = (o * stride + k) as isize - pad as isize;
                                let inside = pos >= 0 && (pos as usize) < input;
                                assert_eq!(inside, o >= lo && o < hi, "{out} {input} {stride} {pad} {k} {o}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gemm_and_direct_paths_agree() {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 3, 5, 6), |n, c, h, w| {
            ((n * 7 + c * 5 + h * 3 + w) as f64 * 0.37).sin()
        });
        let k = Tensor::from_fn(Shape::new(4, 3, 3, 3), |a, b, c, d| {
            ((a * 11 + b * 3 + c * 2 + d) as f64 * 0.21).cos()
        });
        let b = Tensor::from_fn(Shape::new(1, 4, 1, 1), |_, c, _, _| c as f64 * 0.1);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 2)] {
            let g = ConvGeom::new(x.shape(), k.shape(), stride, pad).unwrap();
            let mut direct = vec![0.0; 4 * g.oh * g.ow];
            let mut gemm = direct.clone();
            let item = &x.data()[..x.shape().item_len()];
            conv_direct_item(&g, item, k.data(), b.data(), &mut direct);
            conv_gemm_item(&g, item, k.data(), b.data(), &mut gemm);
            for (a, b) in direct.iter().zip(&gemm) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 2, 3, 2), |_, c, h, w| (c + 2 * h + w) as f64);
        let y = avg_pool2(&upsample2(&x)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn pool_rejects_odd_dims() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 4));
        assert!(avg_pool2(&x).is_err());
    }
}
