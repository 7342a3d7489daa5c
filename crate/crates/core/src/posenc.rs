//! Sinusoidal positional maps for frame sequences.
//!
//! A positional map is a `d_model`-channel tensor that is constant over the
//! spatial plane. Channel pair `k` carries `sin(p * w_k)` and `cos(p * w_k)`
//! with angular frequency `w_k = 10000^(-2k / d_model)`, so the wavelengths run
//! geometrically from `2π` up towards `10000 · 2π`.
//!
//! Because each channel pair is a point on the unit circle, shifting the
//! position by `m` is a fixed rotation of every pair. [`ShiftMatrix`] exposes
//! those rotations so the relative-position property can be checked directly.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Angular frequency of channel pair `k`.
pub fn frequency(k: usize, d_model: usize) -> f64 {
    10000f64.powf(-(2.0 * k as f64) / d_model as f64)
}

/// Wavelength (period in position units) of channel pair `k`.
pub fn wavelength(k: usize, d_model: usize) -> f64 {
    2.0 * std::f64::consts::PI / frequency(k, d_model)
}

fn check_d_model(d_model: usize) -> Result<()> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::invalid(format!(
            "positional encoding needs an even, positive d_model (got {d_model})"
        )));
    }
    Ok(())
}

/// The per-channel values of a positional map.
pub fn pos_vector(p: f64, d_model: usize) -> Result<Vec<f64>> {
    check_d_model(d_model)?;
    let mut v = Vec::with_capacity(d_model);
    for k in 0..d_model / 2 {
        let (s, c) = (p * frequency(k, d_model)).sin_cos();
        v.push(s);
        v.push(c);
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosMap<T> {
    pub position: f64,
    pub map: Tensor<T>,
}

/// Positional map of token `p` as a `(1, d_model, h, w)` tensor.
pub fn pos_map<T: Scalar>(p: f64, h: usize, w: usize, d_model: usize) -> Result<PosMap<T>> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("positional map needs non-empty spatial extent"));
    }
    let v = pos_vector(p, d_model)?;
    let map = Tensor::from_fn(Shape::new(1, d_model, h, w), |_, c, _, _| T::from_f64(v[c]));
    Ok(PosMap { position: p, map })
}

/// Positional maps for a whole sequence, stacked on the sequence axis.
pub fn pos_maps<T: Scalar>(positions: &[f64], h: usize, w: usize, d_model: usize) -> Result<Tensor<T>> {
    let maps = positions
        .iter()
        .map(|&p| pos_map(p, h, w, d_model).map(|m| m.map))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&maps)
}

/// `features[i] + pos_map(positions[i])` for every sequence item.
pub fn add_positional<T: Scalar>(features: &Tensor<T>, positions: &[f64]) -> Result<Tensor<T>> {
    let s = features.shape();
    if positions.len() != s.n {
        return Err(Error::invalid(format!(
            "{} positions given for a sequence of {} feature maps",
            positions.len(),
            s.n
        )));
    }
    let maps: Tensor<T> = pos_maps(positions, s.h, s.w, s.c)?;
    let data = features
        .data()
        .iter()
        .zip(maps.data())
        .map(|(&f, &p)| f + p)
        .collect();
    Tensor::from_vec(s, data)
}

/// Blockwise rotation taking `pos_map(p)` to `pos_map(p + m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftMatrix {
    pub offset: f64,
    /// One `[[a, b], [c, d]]` block per channel pair.
    pub blocks: Vec<[[f64; 2]; 2]>,
}

impl ShiftMatrix {
    /// Applies the blocks to a `(sin, cos)`-interleaved channel vector.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), 2 * self.blocks.len(), "channel count mismatch");
        let mut out = Vec::with_capacity(v.len());
        for (b, pair) in self.blocks.iter().zip(v.chunks(2)) {
            out.push(b[0][0] * pair[0] + b[0][1] * pair[1]);
            out.push(b[1][0] * pair[0] + b[1][1] * pair[1]);
        }
        out
    }

    /// Applies the blocks to every pixel of a `(n, d_model, h, w)` map.
    pub fn apply_map<T: Scalar>(&self, map: &Tensor<T>) -> Tensor<T> {
        let s = map.shape();
        assert_eq!(s.c, 2 * self.blocks.len(), "channel count mismatch");
        Tensor::from_fn(s, |n, c, y, x| {
            let b = &self.blocks[c / 2];
            let row = c % 2;
            let sin = map.get(n, c - row, y, x).as_f64();
            let cos = map.get(n, c - row + 1, y, x).as_f64();
            T::from_f64(b[row][0] * sin + b[row][1] * cos)
        })
    }

    /// Blockwise product `self · other`.
    pub fn compose(&self, other: &ShiftMatrix) -> ShiftMatrix {
        let blocks = self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| {
                let mut c = [[0.0; 2]; 2];
                for (i, row) in c.iter_mut().enumerate() {
                    for (j, cell) in row.iter_mut().enumerate() {
                        *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j];
                    }
                }
                c
            })
            .collect();
        ShiftMatrix {
            offset: self.offset + other.offset,
            blocks,
        }
    }
}

pub fn shift_matrix(m: f64, d_model: usize) -> Result<ShiftMatrix> {
    check_d_model(d_model)?;
    let blocks = (0..d_model / 2)
        .map(|k| {
            let (s, c) = (frequency(k, d_model) * m).sin_cos();
            [[c, s], [-s, c]]
        })
        .collect();
    Ok(ShiftMatrix { offset: m, blocks })
}
