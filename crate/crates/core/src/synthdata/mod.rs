//! Procedural moving-shape videos and their on-disk form.
//!
//! Rendering is on the integer pixel grid: a square covers each pixel by its
//! exact overlap area, a circle covers the pixels whose centres lie inside it.
//! With integer sizes and velocities every frame is an exact shift of the
//! previous one away from the canvas border. Noise comes from a
//! xoshiro256++ stream seeded with the scene seed, so output is identical on
//! every platform.

mod ppm;

pub use ppm::{
    read_frames, read_manifest, read_ppm, write_frames, write_manifest, write_ppm, ManifestEntry, Rgb8Image,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectShape {
    Square,
    Circle,
}

/// One moving object. Coordinates are `(x, y)` = (column, row) of the
/// top-left corner of the bounding box, in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: ObjectShape,
    pub size: f64,
    pub color: [f64; 3],
    pub start: [f64; 2],
    pub velocity: [f64; 2],
}

impl ObjectSpec {
    /// `(row, col)` of the bounding-box corner at `frame`.
    pub fn anchor_rc(&self, frame: usize) -> (f64, f64) {
        let t = frame as f64;
        (
            self.start[1] + self.velocity[1] * t,
            self.start[0] + self.velocity[0] * t,
        )
    }

    /// Fraction of pixel `(row, col)` covered at `frame`.
    fn coverage(&self, frame: usize, row: usize, col: usize) -> f64 {
        let (r0, c0) = self.anchor_rc(frame);
        match self.shape {
            ObjectShape::Square => {
                let overlap = |lo: f64, p: usize| {
                    let (a, b) = (p as f64, p as f64 + 1.0);
                    (b.min(lo + self.size) - a.max(lo)).max(0.0)
                };
                overlap(r0, row) * overlap(c0, col)
            }
            ObjectShape::Circle => {
                let r = self.size / 2.0;
                let dy = row as f64 + 0.5 - (r0 + r);
                let dx = col as f64 + 0.5 - (c0 + r);
                if dx * dx + dy * dy <= r * r {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Constant([f64; 3]),
    /// Linear left-to-right blend.
    Gradient { left: [f64; 3], right: [f64; 3] },
}

impl Background {
    fn color(&self, col: usize, width: usize) -> [f64; 3] {
        match self {
            Background::Constant(c) => *c,
            Background::Gradient { left, right } => {
                let t = if width > 1 { col as f64 / (width - 1) as f64 } else { 0.0 };
                std::array::from_fn(|k| left[k] + t * (right[k] - left[k]))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub objects: Vec<ObjectSpec>,
    pub background: Background,
    pub noise_sigma: f64,
    pub frames: usize,
    pub seed: u64,
    /// Token of the first frame.
    #[serde(default = "one")]
    pub position_start: f64,
    /// Token increment between consecutive frames.
    #[serde(default = "one")]
    pub position_step: f64,
}

fn one() -> f64 {
    1.0
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::invalid("scene must have at least one frame"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("scene canvas must be non-empty"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        if !(self.position_step > 0.0) {
            return Err(Error::invalid("position step must be positive"));
        }
        let in_unit = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        let bg_ok = match &self.background {
            Background::Constant(c) => in_unit(c),
            Background::Gradient { left, right } => in_unit(left) && in_unit(right),
        };
        if !bg_ok || !self.objects.iter().all(|o| in_unit(&o.color)) {
            return Err(Error::invalid("colors must lie in [0, 1]"));
        }
        if self.objects.iter().any(|o| !(o.size > 0.0)) {
            return Err(Error::invalid("object size must be positive"));
        }
        Ok(())
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.frames)
            .map(|i| self.position_start + self.position_step * i as f64)
            .collect()
    }
}

/// Ordered RGB frames in `[0, 1]` with one position token per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    /// `(n, 3, h, w)`.
    pub frames: Tensor<f64>,
    pub positions: Vec<f64>,
    pub meta: Option<SceneSpec>,
}

impl FrameSequence {
    pub fn new(frames: Tensor<f64>, positions: Vec<f64>, meta: Option<SceneSpec>) -> Result<Self> {
        let s = frames.shape();
        if s.n == 0 || s.c != 3 {
            return Err(Error::invalid(format!("frame sequence must be (n >= 1, 3, h, w), got {s}")));
        }
        if positions.len() != s.n {
            return Err(Error::invalid(format!("{} positions for {} frames", positions.len(), s.n)));
        }
        if positions.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("positions must be strictly increasing"));
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("frame values must lie in [0, 1]"));
        }
        Ok(FrameSequence { frames, positions, meta })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Frames at `indices`, stacked, with their tokens.
    pub fn select(&self, indices: &[usize]) -> (Tensor<f64>, Vec<f64>) {
        let items: Vec<_> = indices.iter().map(|&i| self.frames.item_at(i)).collect();
        let pos = indices.iter().map(|&i| self.positions[i]).collect();
        (Tensor::stack(&items).expect("same shape"), pos)
    }

    /// The same frames in reverse order, re-tokenised so tokens still increase.
    pub fn time_reversed(&self) -> FrameSequence {
        let idx: Vec<usize> = (0..self.len()).rev().collect();
        let (frames, _) = self.select(&idx);
        FrameSequence {
            frames,
            positions: self.positions.clone(),
            meta: None,
        }
    }
}

/// Renders a scene.
pub fn generate(spec: &SceneSpec) -> Result<FrameSequence> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut frames = Tensor::zeros(Shape::new(spec.frames, 3, h, w));
    for f in 0..spec.frames {
        for row in 0..h {
            for col in 0..w {
                let mut rgb = spec.background.color(col, w);
                for obj in &spec.objects {
                    let a = obj.coverage(f, row, col);
                    if a > 0.0 {
                        for k in 0..3 {
                            rgb[k] = (1.0 - a) * rgb[k] + a * obj.color[k];
                        }
                    }
                }
                for (k, v) in rgb.into_iter().enumerate() {
                    frames.set(f, k, row, col, v);
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        for v in frames.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let frames = frames.map(|v| v.clamp(0.0, 1.0));
    FrameSequence::new(frames, spec.positions(), Some(spec.clone()))
}

/// Seeded partition into train / validation / test.
///
/// Sizes are `round(ratio * len)` for the first two parts and the remainder
/// for the last. A part left empty despite a positive ratio is an error.
pub fn split<T: Clone>(items: &[T], ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(*r >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios must be non-negative and sum to 1 (got {a}, {b}, {c})"
        )));
    }
    let n = items.len();
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let n_test = n - n_train - n_val;
    for (name, ratio, size) in [("train", a, n_train), ("validation", b, n_val), ("test", c, n_test)] {
        if ratio > 0.0 && size == 0 {
            return Err(Error::invalid(format!(
                "{name} split is empty: {n} items at ratio {ratio}"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Xoshiro256PlusPlus::seed_from_u64(seed));
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

/// Kinds of procedurally generated datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataPreset {
    /// Integer-motion sequences; first frames are inputs, later ones targets.
    Extrapolate,
    /// Integer-motion sequences tokenised at half steps so that the gap in
    /// the middle of the inputs holds frames at quarter times.
    Interpolate,
    /// Like `Extrapolate`, plus the time reversal of every sequence.
    Direction,
    /// Up to two objects, some static, over random constant or gradient
    /// backgrounds.
    Cluttered,
}

impl std::str::FromStr for DataPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "extrapolate" => Ok(DataPreset::Extrapolate),
            "interpolate" => Ok(DataPreset::Interpolate),
            "direction" => Ok(DataPreset::Direction),
            "cluttered" => Ok(DataPreset::Cluttered),
            _ => Err(Error::Config(format!(
                "unknown data preset `{s}` (expected extrapolate, interpolate, direction or cluttered)"
            ))),
        }
    }
}

/// Parameters of random scene sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSampler {
    pub size: usize,
    pub frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: usize,
    pub max_object_size: usize,
    pub max_speed: i64,
    pub noise_sigma: f64,
    pub circles: bool,
    pub gradient_background: bool,
    /// Redraw velocities until every object moves.
    pub require_motion: bool,
    /// Upper bound of background channel values.
    pub background_max: f64,
    pub position_step: f64,
}

impl SceneSampler {
    pub fn for_preset(preset: DataPreset, size: usize) -> Self {
        let base = SceneSampler {
            size,
            frames: 6,
            min_objects: 1,
            max_objects: 1,
            min_object_size: (size / 5).max(2),
            max_object_size: (size / 3).max(3),
            max_speed: 2,
            noise_sigma: 0.0,
            circles: true,
            gradient_background: false,
            require_motion: true,
            background_max: 0.0,
            position_step: 1.0,
        };
        match preset {
            DataPreset::Extrapolate | DataPreset::Direction => base,
            DataPreset::Cluttered => SceneSampler {
                max_objects: 2,
                gradient_background: true,
                require_motion: false,
                background_max: 1.0,
                ..base
            },
            DataPreset::Interpolate => SceneSampler {
                frames: 13,
                max_speed: 1,
                position_step: 0.5,
                ..base
            },
        }
    }

    /// Draws one scene whose objects stay fully inside the canvas for every frame.
    pub fn sample<R: Rng>(&self, rng: &mut R, seed: u64) -> SceneSpec {
        let n_obj = rng.random_range(self.min_objects..=self.max_objects.max(self.min_objects));
        let span = (self.frames.max(1) - 1) as i64;
        let objects = (0..n_obj)
            .map(|_| {
                let mut size = (rng.random_range(self.min_object_size..=self.max_object_size) as i64).min(self.size as i64);
                let must_move = self.require_motion && self.max_speed > 0 && self.size as i64 > span;
                if must_move {
                    // leave room for at least one pixel per frame
                    size = size.min(self.size as i64 - span);
                }
                let room = self.size as i64 - size;
                let mut axis = || {
                    let mut v = rng.random_range(-self.max_speed..=self.max_speed);
                    while v.abs() * span > room {
                        v -= v.signum();
                    }
                    let travel = v * span;
                    let lo = (-travel).max(0);
                    let hi = (room - travel).min(room);
                    (rng.random_range(lo..=hi) as f64, v as f64)
                };
                let (mut x, mut vx) = axis();
                let (mut y, mut vy) = axis();
                while must_move && vx == 0.0 && vy == 0.0 {
                    (x, vx) = axis();
                    (y, vy) = axis();
                }
                let shape = if self.circles && rng.random_bool(0.5) {
                    ObjectShape::Circle
                } else {
                    ObjectShape::Square
                };
                ObjectSpec {
                    shape,
                    size: size as f64,
                    color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
                    start: [x, y],
                    velocity: [vx, vy],
                }
            })
            .collect();
        let gradient = self.gradient_background && rng.random_bool(0.5);
        let bg_max = self.background_max;
        let mut bg = || std::array::from_fn(|_| if bg_max > 0.0 { rng.random_range(0.0..bg_max) } else { 0.0 });
        let background = if gradient {
            Background::Gradient { left: bg(), right: bg() }
        } else {
            Background::Constant(bg())
        };
        SceneSpec {
            height: self.size,
            width: self.size,
            objects,
            background,
            noise_sigma: self.noise_sigma,
            frames: self.frames,
            seed,
            position_start: 1.0,
            position_step: self.position_step,
        }
    }

    /// `count` scenes drawn from one seeded stream.
    pub fn sample_many(&self, count: usize, seed: u64) -> Vec<SceneSpec> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        (0..count)
            .map(|i| self.sample(&mut rng, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
            .collect()
    }
}

/// Renders `count` sequences of a preset. `Direction` yields `2 * count`
/// sequences: each one followed by its time reversal.
pub fn generate_dataset(preset: DataPreset, size: usize, count: usize, seed: u64) -> Result<Vec<FrameSequence>> {
    let sampler = SceneSampler::for_preset(preset, size);
    let mut out = Vec::with_capacity(count);
    for spec in sampler.sample_many(count, seed) {
        let seq = generate(&spec)?;
        if preset == DataPreset::Direction {
            let rev = seq.time_reversed();
            out.push(seq);
            out.push(rev);
        } else {
            out.push(seq);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
