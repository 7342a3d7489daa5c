//! Multi-head convolutional self-attention over sequences of feature maps.
//!
//! For one head, every frame gets a query map from `q_net` and a key/value
//! pair from `kv_net` (the two channel halves of a single output). The
//! compatibility of query `i` with key `j` is itself a map: `att_net` is
//! applied to the channel concatenation `[Q_i; K_j]` and yields one channel.
//! A softmax across keys, taken independently at every pixel, turns these
//! logits into attention maps, and the output for query `i` is
//! `Σ_j H(i,j) ⊙ V_j` with each single-channel `H(i,j)` broadcast over the
//! value channels. Head outputs are concatenated on channels.
//!
//! There is no `1/sqrt(d)` logit scaling.

use crate::error::{Error, Result};
use crate::model::params::{ConvLayer, ParamLayout};
use crate::tensor::{Axis, Graph, Scalar, Shape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub q_net: ConvLayer,
    pub kv_net: ConvLayer,
    pub att_net: ConvLayer,
}

impl HeadParams {
    pub fn new(layout: &mut ParamLayout, name: &str, d_model: usize, d_head: usize) -> Self {
        HeadParams {
            q_net: layout.conv(&format!("{name}.q_net"), d_model, d_head, 3),
            kv_net: layout.conv(&format!("{name}.kv_net"), d_model, 2 * d_head, 3),
            att_net: layout.conv(&format!("{name}.att_net"), 2 * d_head, 1, 3),
        }
    }

    pub fn d_head(&self) -> usize {
        self.q_net.out_c
    }

    /// Runs one head. Returns the `(q, d_head, h, w)` output and the
    /// `(q, n, h, w)` attention maps.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        queries: Var,
        memory: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let d = self.d_head();
        let sq = g.shape(queries);
        let sm = g.shape(memory);
        let q = self.q_net.forward(g, p, queries)?;
        let kv = self.kv_net.forward(g, p, memory)?;
        let k = g.slice_channels(kv, 0, d)?;
        let v = g.slice_channels(kv, d, d)?;

        // every (query, key) pair in one batched convolution
        let pairs = g.pair_concat(q, k)?;
        let logits = self.att_net.forward(g, p, pairs)?;
        let mut logits = g.reshape(logits, Shape::new(sq.n, sm.n, sq.h, sq.w))?;
        if let Some(mask) = mask {
            logits = g.mask_fill(logits, mask.to_vec())?;
        }
        let attn = g.softmax(logits, Axis::C);
        let out = g.attend(attn, v)?;
        Ok((out, attn))
    }
}

/// Logit map `att_net([Q; K])` for a single `(1, d_head, h, w)` query/key pair.
pub fn attention_logits<T: Scalar>(
    g: &mut Graph<T>,
    p: &[Var],
    query_map: Var,
    key_map: Var,
    att_net: &ConvLayer,
) -> Result<Var> {
    let (sq, sk) = (g.shape(query_map), g.shape(key_map));
    if sq != sk || sq.n != 1 {
        return Err(Error::ShapeMismatch {
            op: "attention_logits",
            left: sq,
            right: sk,
        });
    }
    let pair = g.concat_channels(&[query_map, key_map])?;
    att_net.forward(g, p, pair)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: Vec<HeadParams>,
    pub d_model: usize,
}

/// Per-head attention maps of one attention call, as recorded on the graph.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub maps: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(layout: &mut ParamLayout, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        let d_head = d_model / heads;
        let heads = (0..heads)
            .map(|h| HeadParams::new(layout, &format!("{name}.head{h}"), d_model, d_head))
            .collect();
        Ok(MultiHeadAttention { heads, d_model })
    }

    /// Attention of `queries` `(q, d_model, h, w)` over `memory` `(n, d_model, h, w)`.
    ///
    /// `mask`, when given, has `q * n` entries; `true` forces the logit of that
    /// (query, key) pair to -inf. Every query must keep at least one key.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        queries: Var,
        memory: Var,
        mask: Option<&[bool]>,
    ) -> Result<AttentionOutput> {
        let (sq, sm) = (g.shape(queries), g.shape(memory));
        if sq.c != self.d_model || sm.c != self.d_model || sq.h != sm.h || sq.w != sm.w {
            return Err(Error::ShapeMismatch {
                op: "multi-head attention (queries vs memory)",
                left: sq,
                right: sm,
            });
        }
        if sq.n == 0 || sm.n == 0 {
            return Err(Error::invalid("attention needs at least one query and one key"));
        }
        if let Some(mask) = mask {
            if mask.len() != sq.n * sm.n {
                return Err(Error::invalid(format!(
                    "attention mask has {} entries, expected {}",
                    mask.len(),
                    sq.n * sm.n
                )));
            }
            if mask.chunks(sm.n).any(|row| row.iter().all(|&m| m)) {
                return Err(Error::invalid("attention mask hides every key of some query"));
            }
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut maps = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (o, a) = head.forward(g, p, queries, memory, mask)?;
            outs.push(o);
            maps.push(a);
        }
        let output = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_channels(&outs)?
        };
        Ok(AttentionOutput { output, maps })
    }

    pub fn param_count(&self) -> usize {
        self.heads
            .iter()
            .map(|h| h.q_net.param_count() + h.kv_net.param_count() + h.att_net.param_count())
            .sum()
    }
}

pub fn conv_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &[Var],
    attn: &MultiHeadAttention,
    inputs: Var,
) -> Result<AttentionOutput> {
    attn.forward(g, p, inputs, inputs, None)
}

pub fn cross_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &[Var],
    attn: &MultiHeadAttention,
    queries: Var,
    memory: Var,
) -> Result<AttentionOutput> {
    attn.forward(g, p, queries, memory, None)
}

/// Attention maps of one head, `(queries, keys, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps<T> {
    pub values: Tensor<T>,
    pub normalized: bool,
}

impl<T: Scalar> AttentionMaps<T> {
    pub fn from_softmax(values: Tensor<T>) -> Self {
        AttentionMaps {
            values,
            normalized: true,
        }
    }

    pub fn queries(&self) -> usize {
        self.values.shape().n
    }

    pub fn keys(&self) -> usize {
        self.values.shape().c
    }

    /// The `(1, 1, h, w)` map of one (query, key) pair.
    pub fn map(&self, query: usize, key: usize) -> Tensor<T> {
        let s = self.values.shape();
        let plane = s.plane_len();
        let start = (query * s.c + key) * plane;
        Tensor::from_vec(
            Shape::new(1, 1, s.h, s.w),
            self.values.data()[start..start + plane].to_vec(),
        )
        .expect("plane")
    }

    /// Largest deviation from 1 of the per-pixel sum over keys.
    pub fn max_normalization_error(&self) -> f64 {
        let s = self.values.shape();
        let mut worst: f64 = 0.0;
        for q in 0..s.n {
            for y in 0..s.h {
                for x in 0..s.w {
                    let sum: f64 = (0..s.c).map(|k| self.values.get(q, k, y, x).as_f64()).sum();
                    worst = worst.max((sum - 1.0).abs());
                }
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn setup(heads: usize, d_model: usize) -> (MultiHeadAttention, crate::model::ParamStore<f64>) {
        let mut layout = ParamLayout::default();
        let mha = MultiHeadAttention::new(&mut layout, "attn", d_model, heads).unwrap();
        let store = layout.init(&mut Xoshiro256PlusPlus::seed_from_u64(3));
        (mha, store)
    }

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn singleton_memory_gives_unit_attention() {
        let (mha, store) = setup(2, 4);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(random(Shape::new(1, 4, 3, 3), 1));
        let out = conv_self_attention(&mut g, &p, &mha, x).unwrap();
        for &m in &out.maps {
            assert!(g.value(m).data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut layout = ParamLayout::default();
        assert!(MultiHeadAttention::new(&mut layout, "a", 6, 4).is_err());
    }

    #[test]
    fn fully_masked_query_rejected() {
        let (mha, store) = setup(1, 2);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(random(Shape::new(2, 2, 2, 2), 1));
        let mask = [true, true, false, false];
        assert!(mha.forward(&mut g, &p, x, x, Some(&mask)).is_err());
    }

    #[test]
    fn logits_of_zero_net_are_zero() {
        let mut layout = ParamLayout::default();
        let att = layout.conv("att", 4, 1, 3);
        let store: crate::model::ParamStore<f64> = layout.init(&mut Xoshiro256PlusPlus::seed_from_u64(0));
        let mut store = store;
        store.by_id_mut(att.weight).data_mut().fill(0.0);
        store.by_id_mut(att.bias).data_mut().fill(0.0);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let q = g.constant(random(Shape::new(1, 2, 3, 3), 5));
        let k = g.constant(random(Shape::new(1, 2, 3, 3), 6));
        let l = attention_logits(&mut g, &p, q, k, &att).unwrap();
        assert_eq!(g.shape(l), Shape::new(1, 1, 3, 3));
        assert!(g.value(l).data().iter().all(|&v| v == 0.0));
    }

    fn run(
        mha: &MultiHeadAttention,
        store: &crate::model::ParamStore<f64>,
        q: &Tensor<f64>,
        m: &Tensor<f64>,
        mask: Option<&[bool]>,
    ) -> (Tensor<f64>, Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let qv = g.constant(q.clone());
        let mv = g.constant(m.clone());
        let out = mha.forward(&mut g, &p, qv, mv, mask).unwrap();
        let maps = out.maps.iter().map(|&v| g.value(v).clone()).collect();
        (g.value(out.output).clone(), maps)
    }

    #[test]
    fn identical_keys_share_attention_evenly() {
        let (mha, store) = setup(2, 4);
        let frame = random(Shape::new(1, 4, 4, 4), 7);
        let memory = Tensor::stack(&[frame.clone(), frame.clone(), frame.clone()]).unwrap();
        let queries = random(Shape::new(2, 4, 4, 4), 8);
        let (out, maps) = run(&mha, &store, &queries, &memory, None);
        for m in &maps {
            assert!(m.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
        let (single, _) = run(&mha, &store, &queries, &frame, None);
        assert!(out.max_abs_diff(&single) < 1e-14);
    }

    #[test]
    fn permuting_queries_permutes_outputs() {
        let (mha, store) = setup(2, 4);
        let queries = random(Shape::new(3, 4, 4, 4), 1);
        let memory = random(Shape::new(2, 4, 4, 4), 2);
        let (out, _) = run(&mha, &store, &queries, &memory, None);
        let perm = [1, 2, 0];
        let pq = Tensor::stack(&perm.map(|i| queries.item_at(i))).unwrap();
        let (pout, _) = run(&mha, &store, &pq, &memory, None);
        for (k, &i) in perm.iter().enumerate() {
            assert!(pout.item_at(k).bitwise_eq(&out.item_at(i)));
        }
    }

    #[test]
    fn masked_key_has_no_influence() {
        let (mha, store) = setup(2, 4);
        let queries = random(Shape::new(2, 4, 4, 4), 1);
        let memory = random(Shape::new(3, 4, 4, 4), 2);
        let mut changed = memory.clone();
        let other = random(Shape::new(1, 4, 4, 4), 3);
        for c in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    changed.set(1, c, y, x, other.get(0, c, y, x));
                }
            }
        }
        let mask = [false, true, false, false, true, false];
        let (a, maps) = run(&mha, &store, &queries, &memory, Some(&mask));
        let (b, _) = run(&mha, &store, &queries, &changed, Some(&mask));
        assert!(a.bitwise_eq(&b));
        for m in maps {
            let am = AttentionMaps::from_softmax(m);
            assert!(am.map(0, 1).data().iter().all(|&v| v == 0.0));
            assert!(am.max_normalization_error() < 1e-12);
        }
        let (c, _) = run(&mha, &store, &queries, &changed, None);
        assert!(a.max_abs_diff(&c) > 1e-9);
    }

    #[test]
    fn head_outputs_depend_only_on_their_head() {
        let (mha, store) = setup(2, 4);
        let x = random(Shape::new(3, 4, 4, 4), 4);
        let (base, _) = run(&mha, &store, &x, &x, None);
        let mut altered = store.clone();
        for (name, t) in altered.iter_mut() {
            if name.contains("head1") {
                for v in t.data_mut() {
                    *v += 0.25;
                }
            }
        }
        let (out, _) = run(&mha, &altered, &x, &x, None);
        let d_head = 2;
        for n in 0..3 {
            for c in 0..4 {
                let same = (0..16).all(|p| out.get(n, c, p / 4, p % 4) == base.get(n, c, p / 4, p % 4));
                assert_eq!(same, c < d_head, "channel {c}");
            }
        }
    }

    #[test]
    fn mismatched_memory_rejected() {
        let (mha, store) = setup(2, 4);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let q = g.constant(random(Shape::new(1, 4, 4, 4), 1));
        let m = g.constant(random(Shape::new(1, 4, 4, 5), 2));
        assert!(cross_attention(&mut g, &p, &mha, q, m).is_err());
    }

    proptest::proptest! {
        #[test]
        fn attention_rows_are_normalized(seed in proptest::prelude::any::<u64>(), n in 1usize..5, q in 1usize..4) {
            let (mha, store) = setup(2, 4);
            let queries = random(Shape::new(q, 4, 3, 3), seed).map(|v| v * 4.0);
            let memory = random(Shape::new(n, 4, 3, 3), seed ^ 77).map(|v| v * 4.0);
            let (_, maps) = run(&mha, &store, &queries, &memory, None);
            for m in maps {
                proptest::prop_assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
                proptest::prop_assert!(AttentionMaps::from_softmax(m).max_normalization_error() < 1e-6);
            }
        }
    }
}
