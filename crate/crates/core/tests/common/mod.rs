//! Naive-loop reference implementations shared by the integration tests.
//!
//! Nothing here calls into the crate's kernels; each function is written
//! directly from the definition with plain nested loops.

#![allow(dead_code)]

use convtx::attention::MultiHeadAttention;
use convtx::model::{ConvLayer, ParamStore};
use convtx::tensor::{Shape, Tensor};
use rand::Rng;

pub fn random_tensor<R: Rng>(rng: &mut R, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

/// Cross-correlation with zero padding.
pub fn conv2d(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let s = input.shape();
    let k = kernel.shape();
    let oh = (s.h + 2 * pad - k.h) / stride + 1;
    let ow = (s.w + 2 * pad - k.w) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(s.n, k.n, oh, ow));
    for n in 0..s.n {
        for o in 0..k.n {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias[o];
                    for i in 0..k.c {
                        for ky in 0..k.h {
                            for kx in 0..k.w {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (x * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += input.get(n, i, iy as usize, ix as usize) * kernel.get(o, i, ky, kx);
                            }
                        }
                    }
                    out.set(n, o, y, x, acc);
                }
            }
        }
    }
    out
}

/// Softmax over the channel axis at every `(n, y, x)`.
pub fn softmax_channels(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for y in 0..s.h {
            for xx in 0..s.w {
                let top = (0..s.c).map(|c| x.get(n, c, y, xx)).fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = (0..s.c).map(|c| (x.get(n, c, y, xx) - top).exp()).collect();
                let total: f64 = e.iter().sum();
                for c in 0..s.c {
                    out.set(n, c, y, xx, e[c] / total);
                }
            }
        }
    }
    out
}

pub fn mse(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut acc = 0.0;
    for (p, q) in a.data().iter().zip(b.data()) {
        acc += (p - q) * (p - q);
    }
    acc / a.numel() as f64
}

/// Mean SSIM over 11×11 gaussian windows (sigma 1.5) of the channel-mean
/// luma, computed window by window and averaged over items.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    const WIN: usize = 11;
    let sigma = 1.5;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut weights = [[0.0; WIN]; WIN];
    let mut total = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, w) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *w = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *w;
        }
    }
    let s = a.shape();
    let luma = |t: &Tensor<f64>, n: usize, y: usize, x: usize| (0..s.c).map(|c| t.get(n, c, y, x)).sum::<f64>() / s.c as f64;
    let mut item_sum = 0.0;
    for n in 0..s.n {
        let mut sum = 0.0;
        let mut count = 0;
        for y0 in 0..=s.h - WIN {
            for x0 in 0..=s.w - WIN {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..WIN {
                    for j in 0..WIN {
                        let w = weights[i][j] / total;
                        let (p, q) = (luma(a, n, y0 + i, x0 + j), luma(b, n, y0 + i, x0 + j));
                        ma += w * p;
                        mb += w * q;
                        aa += w * p * p;
                        bb += w * q * q;
                        ab += w * p * q;
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        item_sum += sum / count as f64;
    }
    item_sum / s.n as f64
}

fn apply(layer: &ConvLayer, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let bias = store.by_id(layer.bias).data().to_vec();
    conv2d(x, store.by_id(layer.weight), &bias, layer.stride, layer.pad)
}

fn channels(t: &Tensor<f64>, start: usize, len: usize) -> Tensor<f64> {
    let s = t.shape();
    Tensor::from_fn(Shape::new(s.n, len, s.h, s.w), |n, c, y, x| t.get(n, start + c, y, x))
}

fn item(t: &Tensor<f64>, n: usize) -> Tensor<f64> {
    let s = t.shape();
    Tensor::from_fn(Shape::new(1, s.c, s.h, s.w), |_, c, y, x| t.get(n, c, y, x))
}

/// Multi-head attention of `queries` over `memory`, one query/key pair at a time.
///
/// Returns the `(q, d_model, h, w)` output and, per head, the `(q, n, h, w)` weights.
pub fn attention(
    mha: &MultiHeadAttention,
    store: &ParamStore<f64>,
    queries: &Tensor<f64>,
    memory: &Tensor<f64>,
) -> (Tensor<f64>, Vec<Tensor<f64>>) {
    let (sq, sm) = (queries.shape(), memory.shape());
    let mut out = Tensor::zeros(sq);
    let mut all_weights = Vec::new();
    let mut offset = 0;
    for head in &mha.heads {
        let d = head.q_net.out_c;
        let q = apply(&head.q_net, store, queries);
        let kv = apply(&head.kv_net, store, memory);
        let (k, v) = (channels(&kv, 0, d), channels(&kv, d, d));
        let mut logits = Tensor::zeros(Shape::new(sq.n, sm.n, sq.h, sq.w));
        for i in 0..sq.n {
            let qi = item(&q, i);
            for j in 0..sm.n {
                let kj = item(&k, j);
                let pair = Tensor::from_fn(Shape::new(1, 2 * d, sq.h, sq.w), |_, c, y, x| {
                    if c < d {
                        qi.get(0, c, y, x)
                    } else {
                        kj.get(0, c - d, y, x)
                    }
                });
                let l = apply(&head.att_net, store, &pair);
                for y in 0..sq.h {
                    for x in 0..sq.w {
                        logits.set(i, j, y, x, l.get(0, 0, y, x));
                    }
                }
            }
        }
        let weights = softmax_channels(&logits);
        for i in 0..sq.n {
            for c in 0..d {
                for y in 0..sq.h {
                    for x in 0..sq.w {
                        let mut acc = 0.0;
                        for j in 0..sm.n {
                            acc += weights.get(i, j, y, x) * v.get(j, c, y, x);
                        }
                        out.set(i, offset + c, y, x, acc);
                    }
                }
            }
        }
        offset += d;
        all_weights.push(weights);
    }
    (out, all_weights)
}
