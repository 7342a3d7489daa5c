use super::kernels::{self, GroupNormStats};
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    N,
    C,
    H,
    W,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::N => 0,
            Axis::C => 1,
            Axis::H => 2,
            Axis::W => 3,
        }
    }
}

/// Deliberate backward-pass corruption, used to prove the gradient checker can
/// see a broken kernel.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradFault {
    ScaleConvKernelGrad(f64),
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupNormStats<T>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Average(Var, Var),
    ConcatC(Vec<Var>),
    SliceC {
        x: Var,
        start: usize,
    },
    ConcatN(Vec<Var>),
    SliceN {
        x: Var,
        start: usize,
    },
    PairConcat {
        q: Var,
        k: Var,
    },
    Reshape(Var),
    Attend {
        a: Var,
        v: Var,
    },
    MaskFill {
        x: Var,
        mask: Vec<bool>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    L2Mean(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Tape of executed operations.
///
/// Nodes are appended in execution order, so the tape is already a
/// topological order and the reverse pass is a single backwards sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<GradFault>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: GradFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(sa)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.shape(), data).expect("same shape")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, &[x, w, b]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = kernels::leaky_relu(self.value(x), slope);
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Var {
        let axis = axis.index();
        let out = kernels::softmax_along(self.value(x), axis);
        self.push(out, Op::Softmax { x, axis }, &[x])
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Result<Var> {
        let (out, stats) = kernels::group_norm(
            self.value(x),
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::Scale(a, k), &[a])
    }

    /// Elementwise `(a + b) / 2`.
    pub fn average(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("average", a, b)?;
        let half = T::from_f64(0.5);
        let out = self.zip_map(a, b, |p, q| (p + q) * half);
        Ok(self.push(out, Op::Average(a, b), &[a, b]))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat_channels of an empty list"))?;
        let s0 = self.shape(first);
        let mut c = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.n != s0.n || s.h != s0.h || s.w != s0.w {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: s0,
                    right: s,
                });
            }
            c += s.c;
        }
        let out_shape = s0.with_c(c);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s0.n {
            for &x in xs {
                let v = self.value(x);
                let len = v.shape().item_len();
                data.extend_from_slice(&v.data()[n * len..(n + 1) * len]);
            }
        }
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(out, Op::ConcatC(xs.to_vec()), xs))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s.c || len == 0 {
            return Err(Error::invalid(format!(
                "slice_channels {start}..{} out of range for {s}",
                start + len
            )));
        }
        let plane = s.plane_len();
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let base = n * s.item_len() + start * plane;
            data.extend_from_slice(&v[base..base + len * plane]);
        }
        let out = Tensor::from_vec(s.with_c(len), data)?;
        Ok(self.push(out, Op::SliceC { x, start }, &[x]))
    }

    /// Concatenation along the sequence axis.
    pub fn concat_items(&mut self, xs: &[Var]) -> Result<Var> {
        let parts: Vec<Tensor<T>> = xs.iter().map(|&x| self.value(x).clone()).collect();
        let out = Tensor::stack(&parts)?;
        Ok(self.push(out, Op::ConcatN(xs.to_vec()), xs))
    }

    pub fn slice_items(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s.n || len == 0 {
            return Err(Error::invalid(format!(
                "slice_items {start}..{} out of range for {s}",
                start + len
            )));
        }
        let il = s.item_len();
        let data = self.value(x).data()[start * il..(start + len) * il].to_vec();
        let out = Tensor::from_vec(s.with_n(len), data)?;
        Ok(self.push(out, Op::SliceN { x, start }, &[x]))
    }

    /// Every (query, key) pair concatenated on channels: item `i * nk + j` is `[q_i; k_j]`.
    pub fn pair_concat(&mut self, q: Var, k: Var) -> Result<Var> {
        let (sq, sk) = (self.shape(q), self.shape(k));
        if sq.h != sk.h || sq.w != sk.w {
            return Err(Error::ShapeMismatch {
                op: "pair_concat",
                left: sq,
                right: sk,
            });
        }
        let out_shape = Shape::new(sq.n * sk.n, sq.c + sk.c, sq.h, sq.w);
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let (ql, kl) = (sq.item_len(), sk.item_len());
        let mut data = Vec::with_capacity(out_shape.numel());
        for i in 0..sq.n {
            for j in 0..sk.n {
                data.extend_from_slice(&qd[i * ql..(i + 1) * ql]);
                data.extend_from_slice(&kd[j * kl..(j + 1) * kl]);
            }
        }
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(out, Op::PairConcat { q, k }, &[q, k]))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// `out[i] = sum_j a[i, j] * v[j]`, with the single-channel weight map
    /// `a[i, j]` broadcast over the channels of `v[j]`.
    ///
    /// `a` is `(q, n, h, w)` and `v` is `(n, d, h, w)`.
    pub fn attend(&mut self, a: Var, v: Var) -> Result<Var> {
        let (sa, sv) = (self.shape(a), self.shape(v));
        if sa.c != sv.n || sa.h != sv.h || sa.w != sv.w {
            return Err(Error::ShapeMismatch {
                op: "attend",
                left: sa,
                right: sv,
            });
        }
        let plane = sa.plane_len();
        let out_shape = Shape::new(sa.n, sv.c, sa.h, sa.w);
        let (ad, vd) = (self.value(a).data(), self.value(v).data());
        let mut out = vec![T::zero(); out_shape.numel()];
        let mut terms = Vec::with_capacity(sv.n);
        for i in 0..sa.n {
            for c in 0..sv.c {
                let o = &mut out[(i * sv.c + c) * plane..(i * sv.c + c + 1) * plane];
                for (p, o) in o.iter_mut().enumerate() {
                    terms.clear();
                    terms.extend((0..sv.n).map(|j| ad[(i * sa.c + j) * plane + p] * vd[(j * sv.c + c) * plane + p]));
                    *o = kernels::order_free_sum(&mut terms);
                }
            }
        }
        let out = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(out, Op::Attend { a, v }, &[a, v]))
    }

    /// Sets every `(item, channel)` plane with `mask[item * c + channel] == true` to -inf.
    pub fn mask_fill(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let s = self.shape(x);
        if mask.len() != s.n * s.c {
            return Err(Error::invalid(format!(
                "mask of length {} does not cover the {} planes of {s}",
                mask.len(),
                s.n * s.c
            )));
        }
        let plane = s.plane_len();
        let mut out = self.value(x).clone();
        for (p, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            if mask[p] {
                chunk.fill(T::neg_infinity());
            }
        }
        Ok(self.push(out, Op::MaskFill { x, mask }, &[x]))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let out = kernels::avg_pool2(self.value(x))?;
        Ok(self.push(out, Op::AvgPool2(x), &[x]))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = kernels::upsample2(self.value(x));
        self.push(out, Op::Upsample2(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_f64(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("mse", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let total = x
            .iter()
            .zip(y)
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum::<T>();
        let out = Tensor::scalar(total / T::from_f64(s.numel() as f64));
        Ok(self.push(out, Op::Mse(a, b), &[a, b]))
    }

    /// Mean over sequence items of the (unsquared) L2 norm of each item's difference.
    pub fn l2_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("l2_mean", a, b)?;
        let total = self
            .item_norms(a, b)
            .into_iter()
            .sum::<T>();
        let out = Tensor::scalar(total / T::from_f64(s.n as f64));
        Ok(self.push(out, Op::L2Mean(a, b), &[a, b]))
    }

    fn item_norms(&self, a: Var, b: Var) -> Vec<T> {
        let il = self.shape(a).item_len();
        self.value(a)
            .data()
            .chunks(il)
            .zip(self.value(b).data().chunks(il))
            .map(|(x, y)| {
                x.iter()
                    .zip(y)
                    .map(|(&p, &q)| (p - q) * (p - q))
                    .sum::<T>()
                    .sqrt()
            })
            .collect()
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Leaf gradients accumulate across calls; use [`Graph::zero_grad`] to reset.
    /// Every leaf that requires a gradient ends up with one, zero if the loss
    /// does not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                            *a = *a + *b;
                        }
                    }
                    None => node.grad = Some(Tensor::from_vec(node.value.shape(), g)?),
                }
                continue;
            }
            for (var, contrib) in self.node_backward(id, g)? {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(contrib) {
                            *a = *a + b;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        for node in &mut self.nodes[..=loss.0] {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn node_backward(&self, id: usize, g: Vec<T>) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[id];
        let val = |v: Var| self.value(v);
        let needs = |v: Var| self.requires_grad(v);
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, stride, pad } => {
                let go = Tensor::from_vec(node.value.shape(), g)?;
                let grads =
                    kernels::conv2d_backward(val(*x), val(*w), &go, *stride, *pad, needs(*x))?;
                let mut gw = grads.kernel.into_data();
                if let Some(GradFault::ScaleConvKernelGrad(s)) = self.fault {
                    let s = T::from_f64(s);
                    gw.iter_mut().for_each(|v| *v = *v * s);
                }
                let mut out = vec![(*w, gw), (*b, grads.bias.into_data())];
                if let Some(gx) = grads.input {
                    out.push((*x, gx.into_data()));
                }
                out
            }
            Op::LeakyRelu { x, slope } => {
                let gx = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { gi * *slope })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Softmax { x, axis } => {
                vec![(*x, kernels::softmax_backward(&node.value, &g, *axis))]
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (gx, gg, gb) = kernels::group_norm_backward(
                    val(*x).shape(),
                    *groups,
                    val(*gamma).data(),
                    stats,
                    &g,
                );
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g)],
            Op::Sub(a, b) => {
                let neg = g.iter().map(|&v| -v).collect();
                vec![(*a, g), (*b, neg)]
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b).data()).map(|(&p, &q)| p * q).collect();
                let gb = g.iter().zip(val(*a).data()).map(|(&p, &q)| p * q).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, k) => vec![(*a, g.iter().map(|&v| v * *k).collect())],
            Op::Average(a, b) => {
                let half = T::from_f64(0.5);
                let h: Vec<T> = g.iter().map(|&v| v * half).collect();
                vec![(*a, h.clone()), (*b, h)]
            }
            Op::ConcatC(xs) => {
                let s = node.value.shape();
                let il = s.item_len();
                let mut out: Vec<(Var, Vec<T>)> = xs
                    .iter()
                    .map(|&x| (x, Vec::with_capacity(self.shape(x).numel())))
                    .collect();
                for n in 0..s.n {
                    let mut off = n * il;
                    for (x, buf) in out.iter_mut() {
                        let len = self.shape(*x).item_len();
                        buf.extend_from_slice(&g[off..off + len]);
                        off += len;
                    }
                }
                out
            }
            Op::SliceC { x, start } => {
                let s = val(*x).shape();
                let so = node.value.shape();
                let plane = s.plane_len();
                let mut gx = vec![T::zero(); s.numel()];
                for n in 0..s.n {
                    let dst = n * s.item_len() + start * plane;
                    let src = n * so.item_len();
                    gx[dst..dst + so.item_len()].copy_from_slice(&g[src..src + so.item_len()]);
                }
                vec![(*x, gx)]
            }
            Op::ConcatN(xs) => {
                let mut off = 0;
                xs.iter()
                    .map(|&x| {
                        let len = self.shape(x).numel();
                        let part = g[off..off + len].to_vec();
                        off += len;
                        (x, part)
                    })
                    .collect()
            }
            Op::SliceN { x, start } => {
                let s = val(*x).shape();
                let mut gx = vec![T::zero(); s.numel()];
                let off = start * s.item_len();
                gx[off..off + g.len()].copy_from_slice(&g);
                vec![(*x, gx)]
            }
            Op::PairConcat { q, k } => {
                let (sq, sk) = (self.shape(*q), self.shape(*k));
                let (ql, kl) = (sq.item_len(), sk.item_len());
                let mut gq = vec![T::zero(); sq.numel()];
                let mut gk = vec![T::zero(); sk.numel()];
                for i in 0..sq.n {
                    for j in 0..sk.n {
                        let base = (i * sk.n + j) * (ql + kl);
                        for (d, &s) in gq[i * ql..(i + 1) * ql].iter_mut().zip(&g[base..base + ql]) {
                            *d = *d + s;
                        }
                        for (d, &s) in gk[j * kl..(j + 1) * kl]
                            .iter_mut()
                            .zip(&g[base + ql..base + ql + kl])
                        {
                            *d = *d + s;
                        }
                    }
                }
                vec![(*q, gq), (*k, gk)]
            }
            Op::Reshape(x) => vec![(*x, g)],
            Op::Attend { a, v } => {
                let (sa, sv) = (self.shape(*a), self.shape(*v));
                let plane = sa.plane_len();
                let (ad, vd) = (val(*a).data(), val(*v).data());
                let mut ga = vec![T::zero(); sa.numel()];
                let mut gv = vec![T::zero(); sv.numel()];
                for i in 0..sa.n {
                    for j in 0..sv.n {
                        let ai = (i * sa.c + j) * plane;
                        for c in 0..sv.c {
                            let vi = (j * sv.c + c) * plane;
                            let oi = (i * sv.c + c) * plane;
                            for p in 0..plane {
                                ga[ai + p] = ga[ai + p] + g[oi + p] * vd[vi + p];
                                gv[vi + p] = gv[vi + p] + ad[ai + p] * g[oi + p];
                            }
                        }
                    }
                }
                vec![(*a, ga), (*v, gv)]
            }
            Op::MaskFill { x, mask } => {
                let plane = node.value.shape().plane_len();
                let mut gx = g;
                for (p, chunk) in gx.chunks_mut(plane).enumerate() {
                    if mask[p] {
                        chunk.fill(T::zero());
                    }
                }
                vec![(*x, gx)]
            }
            Op::AvgPool2(x) => vec![(*x, kernels::avg_pool2_backward(val(*x).shape(), &g))],
            Op::Upsample2(x) => vec![(*x, kernels::upsample2_backward(val(*x).shape(), &g))],
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::Mean(x) => {
                let n = val(*x).numel();
                vec![(*x, vec![g[0] / T::from_f64(n as f64); n])]
            }
            Op::Mse(a, b) => {
                let n = T::from_f64(val(*a).numel() as f64);
                let k = (g[0] + g[0]) / n;
                let ga: Vec<T> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(&p, &q)| (p - q) * k)
                    .collect();
                let gb = ga.iter().map(|&v| -v).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::L2Mean(a, b) => {
                let s = val(*a).shape();
                let il = s.item_len();
                let norms = self.item_norms(*a, *b);
                let scale = g[0] / T::from_f64(s.n as f64);
                let mut ga = Vec::with_capacity(s.numel());
                for (i, (x, y)) in val(*a)
                    .data()
                    .chunks(il)
                    .zip(val(*b).data().chunks(il))
                    .enumerate()
                {
                    let nrm = norms[i];
                    for (&p, &q) in x.iter().zip(y) {
                        ga.push(if nrm > T::zero() {
                            (p - q) / nrm * scale
                        } else {
                            T::zero()
                        });
                    }
                }
                let gb = ga.iter().map(|&v| -v).collect();
                vec![(*a, ga), (*b, gb)]
            }
        };
        Ok(out)
    }
}
