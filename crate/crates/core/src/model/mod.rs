//! The full frame synthesis model.
//!
//! `frames → embed → (+ positional maps) → encoder → memory`, then
//! `queries → (+ positional maps) → decoder(memory) → synthesis → frames`.

pub mod checkpoint;
pub mod config;
pub mod params;
pub mod synthesis;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub use checkpoint::{Checkpoint, Moments};
pub use config::{FeedForward, ModelConfig, PosencMode, Preset, UNetWidths};
pub use params::{ConvLayer, NormLayer, ParamId, ParamLayout, ParamStore};
pub use synthesis::{SynthesisNet, UNet};

use crate::attention::{AttentionMaps, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::posenc::pos_maps;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Extrapolate,
    Interpolate,
}

/// Input frames plus what to synthesize from them.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisRequest<T> {
    pub mode: Mode,
    /// `(n, 3, h, w)` RGB in `[0, 1]`.
    pub frames: Tensor<T>,
    pub positions: Vec<f64>,
    pub query_positions: Vec<f64>,
}

/// Default fractional times of the three interpolation targets.
pub const MID_TIMES: [f64; 3] = [0.25, 0.5, 0.75];

impl<T: Scalar> SynthesisRequest<T> {
    /// Predict `count` frames after the inputs, at tokens `last + 1, last + 2, ...`.
    pub fn extrapolate(frames: Tensor<T>, positions: Vec<f64>, count: usize) -> Result<Self> {
        check_inputs(&frames, &positions)?;
        if count == 0 {
            return Err(Error::invalid("extrapolation needs at least one target"));
        }
        let last = *positions.last().expect("non-empty");
        let query_positions = (1..=count).map(|k| last + k as f64).collect();
        Ok(SynthesisRequest {
            mode: Mode::Extrapolate,
            frames,
            positions,
            query_positions,
        })
    }

    /// Predict frames inside the middle gap of an even-length input, at
    /// fractional times `t` in `[0, 1]` between the two flanking frames.
    pub fn interpolate(frames: Tensor<T>, positions: Vec<f64>, times: &[f64]) -> Result<Self> {
        check_inputs(&frames, &positions)?;
        let n = positions.len();
        if n % 2 != 0 {
            return Err(Error::invalid(format!(
                "interpolation needs an even number of input frames (got {n})"
            )));
        }
        if times.is_empty() {
            return Err(Error::invalid("interpolation needs at least one target time"));
        }
        if let Some(t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid(format!("target time {t} outside [0, 1]")));
        }
        let (a, b) = (positions[n / 2 - 1], positions[n / 2]);
        let query_positions = times.iter().map(|t| a + t * (b - a)).collect();
        Ok(SynthesisRequest {
            mode: Mode::Interpolate,
            frames,
            positions,
            query_positions,
        })
    }

    pub fn query_count(&self) -> usize {
        self.query_positions.len()
    }

    /// Indices of the two frames flanking the interpolation gap.
    pub fn gap(&self) -> (usize, usize) {
        let n = self.positions.len();
        (n / 2 - 1, n / 2)
    }
}

fn check_inputs<T: Scalar>(frames: &Tensor<T>, positions: &[f64]) -> Result<()> {
    let s = frames.shape();
    if s.c != 3 {
        return Err(Error::invalid(format!("expected RGB frames, got {} channels", s.c)));
    }
    if s.n == 0 {
        return Err(Error::invalid("empty input sequence"));
    }
    if positions.len() != s.n {
        return Err(Error::invalid(format!(
            "{} positions for {} frames",
            positions.len(),
            s.n
        )));
    }
    if positions.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("positions must be strictly increasing"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardNet {
    pub convs: Vec<ConvLayer>,
    pub slope: f64,
}

impl FeedForwardNet {
    fn new(layout: &mut ParamLayout, name: &str, d: usize, kind: FeedForward, slope: f64) -> Self {
        let n = match kind {
            FeedForward::Single => 1,
            FeedForward::Double => 2,
        };
        let convs = (0..n).map(|i| layout.conv(&format!("{name}.conv{i}"), d, d, 3)).collect();
        FeedForwardNet { convs, slope }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let slope = T::from_f64(self.slope);
        let first = self.convs[0].forward_act(g, p, x, slope)?;
        match self.convs.get(1) {
            Some(second) => second.forward(g, p, first),
            None => Ok(first),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: NormLayer,
    pub ff: FeedForwardNet,
    pub norm2: NormLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: NormLayer,
    pub cross_attn: MultiHeadAttention,
    pub norm2: NormLayer,
    pub ff: FeedForwardNet,
    pub norm3: NormLayer,
}

/// Attention-map nodes recorded during one forward pass, indexed `[layer][head]`.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub encoder: Vec<Vec<Var>>,
    pub decoder_self: Vec<Vec<Var>>,
    pub decoder_cross: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `(q, 3, h, w)`, unclamped.
    pub frames: Var,
    pub trace: AttentionTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTransformer {
    config: ModelConfig,
    layout: ParamLayout,
    pub embed: Vec<ConvLayer>,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub synthesis: SynthesisNet,
}

impl ConvTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let d = config.d_model;
        let groups = config.norm_groups();
        let eps = config.norm_eps;
        let slope = config.leaky_slope;

        let embed = (0..config.embed_layers)
            .map(|i| layout.conv(&format!("embed.conv{i}"), if i == 0 { 3 } else { d }, d, 3))
            .collect();

        let mut encoder = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let name = format!("encoder{l}");
            encoder.push(EncoderLayer {
                attn: MultiHeadAttention::new(&mut layout, &format!("{name}.attn"), d, config.heads)?,
                norm1: layout.norm(&format!("{name}.norm1"), d, groups, eps),
                ff: FeedForwardNet::new(&mut layout, &format!("{name}.ff"), d, config.feed_forward, slope),
                norm2: layout.norm(&format!("{name}.norm2"), d, groups, eps),
            });
        }

        let mut decoder = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let name = format!("decoder{l}");
            decoder.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(&mut layout, &format!("{name}.self_attn"), d, config.heads)?,
                norm1: layout.norm(&format!("{name}.norm1"), d, groups, eps),
                cross_attn: MultiHeadAttention::new(&mut layout, &format!("{name}.cross_attn"), d, config.heads)?,
                norm2: layout.norm(&format!("{name}.norm2"), d, groups, eps),
                ff: FeedForwardNet::new(&mut layout, &format!("{name}.ff"), d, config.feed_forward, slope),
                norm3: layout.norm(&format!("{name}.norm3"), d, groups, eps),
            });
        }

        let synthesis = SynthesisNet::new(&mut layout, &config);
        Ok(ConvTransformer {
            config,
            layout,
            embed,
            encoder,
            decoder,
            synthesis,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// He-normal weights and fan-in uniform biases from a xoshiro256++ stream.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        self.layout.init(&mut Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn param_count(&self) -> usize {
        self.layout.scalar_count()
    }

    /// Shared-weight conv stack applied to every frame: `(n, 3, h, w) → (n, d_model, h, w)`.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], frames: Var) -> Result<Var> {
        let s = g.shape(frames);
        if s.c != 3 {
            return Err(Error::invalid(format!("embedding expects RGB frames, got {} channels", s.c)));
        }
        let slope = T::from_f64(self.config.leaky_slope);
        let mut x = frames;
        for conv in &self.embed {
            x = conv.forward_act(g, p, x, slope)?;
        }
        Ok(x)
    }

    /// Positional maps for `positions` as a graph constant, or `None` when disabled.
    fn positional<T: Scalar>(&self, g: &mut Graph<T>, like: Var, positions: &[f64]) -> Result<Option<Var>> {
        if self.config.posenc == PosencMode::Off {
            return Ok(None);
        }
        let s = g.shape(like);
        if positions.len() != s.n {
            return Err(Error::invalid(format!(
                "{} positions for a sequence of {}",
                positions.len(),
                s.n
            )));
        }
        Ok(Some(g.constant(pos_maps(positions, s.h, s.w, s.c)?)))
    }

    fn with_positional<T: Scalar>(&self, g: &mut Graph<T>, x: Var, positions: &[f64]) -> Result<Var> {
        match self.positional(g, x, positions)? {
            Some(pm) => g.add(x, pm),
            None => Ok(x),
        }
    }

    fn residual_norm<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
        sub: Var,
        norm: &NormLayer,
    ) -> Result<Var> {
        let y = if self.config.residual { g.add(x, sub)? } else { sub };
        norm.forward(g, p, y)
    }

    /// Encoder stack. `z` must already carry its positional maps.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        z: Var,
        positions: &[f64],
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let readd = match self.config.posenc {
            PosencMode::PerLayer => self.positional(g, z, positions)?,
            _ => None,
        };
        let mut x = z;
        let mut maps = Vec::with_capacity(self.encoder.len());
        for (l, layer) in self.encoder.iter().enumerate() {
            if let (true, Some(pm)) = (l > 0, readd) {
                x = g.add(x, pm)?;
            }
            let a = layer.attn.forward(g, p, x, x, None)?;
            x = self.residual_norm(g, p, x, a.output, &layer.norm1)?;
            let f = layer.ff.forward(g, p, x)?;
            x = self.residual_norm(g, p, x, f, &layer.norm2)?;
            maps.push(a.maps);
        }
        Ok((x, maps))
    }

    /// Decoder inputs before positional maps: copies of the last embedding
    /// (extrapolation) or the mean of the two embeddings flanking the gap
    /// (interpolation).
    pub fn init_queries<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        request: &SynthesisRequest<T>,
        embedded: Var,
    ) -> Result<Var> {
        let n = g.shape(embedded).n;
        if n != request.positions.len() {
            return Err(Error::invalid(format!(
                "embedding has {n} frames but the request has {}",
                request.positions.len()
            )));
        }
        let q = request.query_count();
        let seed = match request.mode {
            Mode::Extrapolate => g.slice_items(embedded, n - 1, 1)?,
            Mode::Interpolate => {
                if n < 2 || n % 2 != 0 {
                    return Err(Error::invalid(format!(
                        "interpolation needs an even number of frames (got {n})"
                    )));
                }
                let (a, b) = request.gap();
                let left = g.slice_items(embedded, a, 1)?;
                let right = g.slice_items(embedded, b, 1)?;
                g.average(left, right)?
            }
        };
        if q == 1 {
            Ok(seed)
        } else {
            g.concat_items(&vec![seed; q])
        }
    }

    /// Decoder stack. `queries` must already carry their positional maps.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        queries: Var,
        memory: Var,
        query_positions: &[f64],
    ) -> Result<(Var, Vec<Vec<Var>>, Vec<Vec<Var>>)> {
        let readd = match self.config.posenc {
            PosencMode::PerLayer => self.positional(g, queries, query_positions)?,
            _ => None,
        };
        let mut x = queries;
        let mut self_maps = Vec::with_capacity(self.decoder.len());
        let mut cross_maps = Vec::with_capacity(self.decoder.len());
        for (l, layer) in self.decoder.iter().enumerate() {
            if let (true, Some(pm)) = (l > 0, readd) {
                x = g.add(x, pm)?;
            }
            let a = layer.self_attn.forward(g, p, x, x, None)?;
            x = self.residual_norm(g, p, x, a.output, &layer.norm1)?;
            let c = layer.cross_attn.forward(g, p, x, memory, None)?;
            x = self.residual_norm(g, p, x, c.output, &layer.norm2)?;
            let f = layer.ff.forward(g, p, x)?;
            x = self.residual_norm(g, p, x, f, &layer.norm3)?;
            self_maps.push(a.maps);
            cross_maps.push(c.maps);
        }
        Ok((x, self_maps, cross_maps))
    }

    pub fn synthesize<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], decoded: Var) -> Result<Var> {
        let s = g.shape(decoded);
        self.config.check_frame_size(s.h, s.w)?;
        self.synthesis.forward(g, p, decoded)
    }

    /// Full forward pass on a graph; `p` comes from [`ParamStore::bind`] or
    /// [`ParamStore::bind_frozen`].
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        request: &SynthesisRequest<T>,
    ) -> Result<ForwardOutput> {
        let s = request.frames.shape();
        self.config.check_frame_size(s.h, s.w)?;
        let frames = g.constant(request.frames.clone());
        let embedded = self.embed(g, p, frames)?;
        let z = self.with_positional(g, embedded, &request.positions)?;
        let (memory, encoder) = self.encode(g, p, z, &request.positions)?;
        let queries = self.init_queries(g, request, embedded)?;
        let queries = self.with_positional(g, queries, &request.query_positions)?;
        let (decoded, decoder_self, decoder_cross) =
            self.decode(g, p, queries, memory, &request.query_positions)?;
        let out = self.synthesize(g, p, decoded)?;
        Ok(ForwardOutput {
            frames: out,
            trace: AttentionTrace {
                encoder,
                decoder_self,
                decoder_cross,
            },
        })
    }

    /// Unclamped prediction with frozen parameters.
    pub fn predict_raw<T: Scalar>(&self, params: &ParamStore<T>, request: &SynthesisRequest<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, request)?;
        Ok(g.value(out.frames).clone())
    }

    /// Inference: prediction clamped to `[0, 1]`.
    pub fn predict<T: Scalar>(&self, params: &ParamStore<T>, request: &SynthesisRequest<T>) -> Result<Tensor<T>> {
        Ok(self.predict_raw(params, request)?.clamp01())
    }

    /// Prediction plus every attention map of the pass.
    pub fn predict_with_attention<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        request: &SynthesisRequest<T>,
    ) -> Result<(Tensor<T>, AttentionDump<T>)> {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, request)?;
        let collect = |maps: &Vec<Vec<Var>>| -> Vec<Vec<AttentionMaps<T>>> {
            maps.iter()
                .map(|heads| {
                    heads.iter()
                        .map(|&v| AttentionMaps::from_softmax(g.value(v).clone()))
                        .collect()
                })
                .collect()
        };
        let dump = AttentionDump {
            encoder: collect(&out.trace.encoder),
            decoder_self: collect(&out.trace.decoder_self),
            decoder_cross: collect(&out.trace.decoder_cross),
        };
        Ok((g.value(out.frames).clamp01(), dump))
    }

    /// Encoder output for raw frames, with frozen parameters.
    pub fn encode_frames<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        frames: &Tensor<T>,
        positions: &[f64],
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let f = g.constant(frames.clone());
        let e = self.embed(&mut g, &p, f)?;
        let z = self.with_positional(&mut g, e, positions)?;
        let (m, _) = self.encode(&mut g, &p, z, positions)?;
        Ok(g.value(m).clone())
    }
}

/// Attention maps of every layer and head, indexed `[layer][head]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump<T> {
    pub encoder: Vec<Vec<AttentionMaps<T>>>,
    pub decoder_self: Vec<Vec<AttentionMaps<T>>>,
    pub decoder_cross: Vec<Vec<AttentionMaps<T>>>,
}

impl<T: Scalar> AttentionDump<T> {
    pub fn all(&self) -> impl Iterator<Item = &AttentionMaps<T>> {
        self.encoder
            .iter()
            .chain(&self.decoder_self)
            .chain(&self.decoder_cross)
            .flatten()
    }
}
