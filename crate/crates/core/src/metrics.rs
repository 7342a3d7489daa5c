//! Image quality: PSNR, SSIM and residual maps.
//!
//! Frames are `(n, 3, h, w)` tensors in `[0, 1]`; multi-item tensors are
//! scored item by item and averaged where noted.

use crate::error::{Error, Result};
use crate::synthdata::Rgb8Image;
use crate::tensor::{Scalar, Shape, Tensor};

/// Returned instead of infinity for (near-)identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityScore {
    pub psnr_db: f64,
    pub ssim: f64,
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Shape> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(a.shape())
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("mse", a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.numel().max(1) as f64)
}

/// Peak signal-to-noise ratio in dB with peak 1, capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Normalized 1-D gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Channel-mean luma plane of item `n`.
fn luma<T: Scalar>(t: &Tensor<T>, n: usize) -> Vec<f64> {
    let s = t.shape();
    let mut out = vec![0.0; s.h * s.w];
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                out[y * s.w + x] += t.get(n, c, y, x).as_f64();
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= s.c as f64);
    out
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Per-window SSIM of two luma planes.
pub fn ssim_map(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::invalid("luma planes do not match the stated size"));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let aa = filter_valid(&prod(a, a), h, w, &taps);
    let bb = filter_valid(&prod(b, b), h, w, &taps);
    let ab = filter_valid(&prod(a, b), h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    Ok((0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect())
}

/// Mean SSIM on channel-mean luma, averaged over items.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let s = same_shape("ssim", a, b)?;
    if s.n == 0 {
        return Err(Error::invalid("ssim of an empty tensor"));
    }
    let mut total = 0.0;
    for n in 0..s.n {
        let m = ssim_map(&luma(a, n), &luma(b, n), s.h, s.w)?;
        total += m.iter().sum::<f64>() / m.len() as f64;
    }
    Ok(total / s.n as f64)
}

pub fn quality<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<QualityScore> {
    Ok(QualityScore {
        psnr_db: psnr(pred, truth)?,
        ssim: ssim(pred, truth)?,
    })
}

/// Per-pixel mean absolute channel difference, scaled to `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMap {
    pub width: usize,
    pub height: usize,
    /// Row-major values in `[0, 255]`.
    pub values: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

impl ResidualMap {
    /// Gray PPM image (equal RGB channels).
    pub fn to_image(&self) -> Rgb8Image {
        let unit: Vec<f64> = self.values.iter().map(|v| v / 255.0).collect();
        Rgb8Image::from_gray(self.width, self.height, &unit)
    }
}

/// Residual map of item `n`.
pub fn residual_map<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, n: usize) -> Result<ResidualMap> {
    let s = same_shape("residual_map", pred, truth)?;
    if n >= s.n {
        return Err(Error::invalid(format!("item {n} out of range for {s}")));
    }
    let mut values = Vec::with_capacity(s.h * s.w);
    for y in 0..s.h {
        for x in 0..s.w {
            let d: f64 = (0..s.c)
                .map(|c| (pred.get(n, c, y, x).as_f64() - truth.get(n, c, y, x).as_f64()).abs())
                .sum();
            values.push((d / s.c as f64 * 255.0).min(255.0));
        }
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ResidualMap {
        width: s.w,
        height: s.h,
        values,
        min,
        max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random_frame(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| rng.random_range(0.0..1.0))
    }

    /// Direct evaluation of the windowed formula: full 2-D window per position.
    fn ssim_direct(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let s = a.shape();
        let g = gaussian_window(11, 1.5);
        let la = |y: usize, x: usize| (0..3).map(|c| a.get(0, c, y, x)).sum::<f64>() / 3.0;
        let lb = |y: usize, x: usize| (0..3).map(|c| b.get(0, c, y, x)).sum::<f64>() / 3.0;
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=s.h - 11 {
            for x0 in 0..=s.w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wgt = g[i] * g[j];
                        let (p, q) = (la(y0 + i, x0 + j), lb(y0 + i, x0 + j));
                        ma += wgt * p;
                        mb += wgt * q;
                        saa += wgt * p * p;
                        sbb += wgt * q * q;
                        sab += wgt * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = Tensor::full(Shape::new(1, 3, 4, 4), 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = Tensor::full(Shape::new(1, 3, 4, 4), 0.01);
        assert!((psnr(&a, &c).unwrap() - 40.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        let b = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 5));
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = random_frame(1, 16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_small_image_rejected() {
        let a = random_frame(1, 10, 16);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn ssim_of_inverted_binary_is_negative() {
        let a = Tensor::from_fn(Shape::new(1, 3, 16, 16), |_, _, y, x| ((x * 7 + y * 3) % 5 < 2) as u8 as f64);
        let b = a.map(|v| 1.0 - v);
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.0);
        assert!((s - ssim_direct(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_constants_is_luminance_term() {
        let (p, q) = (0.4, 0.5);
        let a = Tensor::full(Shape::new(1, 3, 12, 12), p);
        let b = Tensor::full(Shape::new(1, 3, 12, 12), q);
        let c1 = 1e-4;
        let expect = (2.0 * p * q + c1) / (p * p + q * q + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        for seed in 0..5 {
            let a = random_frame(seed, 14, 17);
            let b = random_frame(seed + 100, 14, 17);
            assert!((ssim(&a, &b).unwrap() - ssim_direct(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_single_pixel() {
        let truth = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        let mut pred = truth.clone();
        for c in 0..3 {
            pred.set(0, c, 2, 1, 1.0);
        }
        let r = residual_map(&pred, &truth, 0).unwrap();
        assert_eq!(r.values.iter().filter(|&&v| v == 255.0).count(), 1);
        assert_eq!(r.values.iter().filter(|&&v| v == 0.0).count(), 15);
        assert_eq!((r.min, r.max), (0.0, 255.0));
        let img = r.to_image();
        assert_eq!(&img.data[(2 * 4 + 1) * 3..(2 * 4 + 1) * 3 + 3], &[255, 255, 255]);
    }

    #[test]
    fn residual_matches_loop_oracle() {
        let a = random_frame(3, 5, 6);
        let b = random_frame(4, 5, 6);
        let r = residual_map(&a, &b, 0).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                let mut d = 0.0;
                for c in 0..3 {
                    d += (a.get(0, c, y, x) - b.get(0, c, y, x)).abs();
                }
                assert!((r.values[y * 6 + x] - d / 3.0 * 255.0).abs() < 1e-12);
            }
        }
        assert!(residual_map(&a, &a, 0).unwrap().values.iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
            let a = random_frame(s1, 12, 12);
            let b = random_frame(s2, 12, 12);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn ssim_stable_under_tiny_offset(seed in any::<u64>(), delta in 0.0f64..1e-6) {
            let a = random_frame(seed, 12, 12).map(|v| v * 0.9);
            let b = random_frame(seed ^ 1, 12, 12).map(|v| v * 0.9);
            let base = ssim(&a, &b).unwrap();
            let moved = ssim(&a.map(|v| v + delta), &b.map(|v| v + delta)).unwrap();
            prop_assert!((base - moved).abs() < 1e-6);
        }
    }
}
