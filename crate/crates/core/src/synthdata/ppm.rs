//! Binary PPM (P6, maxval 255) frames, `meta.txt` sidecars and dataset manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{FrameSequence, SceneSpec};
use crate::error::{Error, IoContext, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8Image {
    /// Quantizes item `n` of a `(_, 3, h, w)` tensor with `round(v * 255)`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Self {
        let s = t.shape();
        assert_eq!(s.c, 3, "RGB tensor expected");
        let mut data = Vec::with_capacity(3 * s.h * s.w);
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..3 {
                    data.push(quantize(t.get(n, c, y, x).as_f64()));
                }
            }
        }
        Rgb8Image {
            width: s.w,
            height: s.h,
            data,
        }
    }

    /// Gray image from one channel plane of values in `[0, 1]`.
    pub fn from_gray(width: usize, height: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), width * height);
        let data = values.iter().flat_map(|&v| [quantize(v); 3]).collect();
        Rgb8Image { width, height, data }
    }

    /// `(1, 3, h, w)` tensor with values `byte / 255`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(Shape::new(1, 3, self.height, self.width), |_, c, y, x| {
            T::from_f64(self.data[(y * self.width + x) * 3 + c] as f64 / 255.0)
        })
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Parses a P6 file. `path` only labels errors.
    pub fn from_ppm_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 2 || &bytes[..2] != b"P6" {
            return Err(Error::PpmBadMagic { path: path.into() });
        }
        let malformed = |reason: String| Error::PpmMalformedHeader {
            path: path.into(),
            reason,
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for (i, field) in fields.iter_mut().enumerate() {
            // whitespace and comments
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            let name = ["width", "height", "maxval"][i];
            if start == pos {
                return Err(malformed(format!("missing {name}")));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| malformed(format!("{name} out of range")))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(malformed(format!("maxval {maxval}, only 255 is supported")));
        }
        if width == 0 || height == 0 {
            return Err(malformed("zero image dimension".into()));
        }
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(malformed("no whitespace after maxval".into())),
        }
        let expected = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(3))
            .ok_or_else(|| malformed("image too large".into()))?;
        let actual = bytes.len() - pos;
        if actual < expected {
            return Err(Error::PpmShortFile {
                path: path.into(),
                expected,
                actual,
            });
        }
        Ok(Rgb8Image {
            width,
            height,
            data: bytes[pos..pos + expected].to_vec(),
        })
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ppm(path: &Path, image: &Rgb8Image) -> Result<()> {
    fs::write(path, image.to_ppm_bytes()).io_context(|| format!("writing {}", path.display()))
}

pub fn read_ppm(path: &Path) -> Result<Rgb8Image> {
    let bytes = fs::read(path).io_context(|| format!("reading {}", path.display()))?;
    Rgb8Image::from_ppm_bytes(&bytes, path)
}

fn frame_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("frame_{i:04}.ppm"))
}

/// Writes `frame_0000.ppm ...` and `meta.txt` into `dir`, creating it if needed.
pub fn write_frames(seq: &FrameSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).io_context(|| format!("creating {}", dir.display()))?;
    let s = seq.frames.shape();
    for i in 0..s.n {
        write_ppm(&frame_path(dir, i), &Rgb8Image::from_tensor(&seq.frames, i))?;
    }
    let mut meta = String::new();
    let positions: Vec<String> = seq.positions.iter().map(f64::to_string).collect();
    let spec = match &seq.meta {
        Some(spec) => serde_json::to_string(spec).map_err(|e| Error::invalid(e.to_string()))?,
        None => "null".into(),
    };
    writeln!(meta, "frames = {}", s.n).unwrap();
    writeln!(meta, "height = {}", s.h).unwrap();
    writeln!(meta, "width = {}", s.w).unwrap();
    writeln!(meta, "positions = {}", positions.join(",")).unwrap();
    writeln!(meta, "spec = {spec}").unwrap();
    let path = dir.join("meta.txt");
    fs::write(&path, meta).io_context(|| format!("writing {}", path.display()))
}

/// Reads a directory written by [`write_frames`].
pub fn read_frames(dir: &Path) -> Result<FrameSequence> {
    let path = dir.join("meta.txt");
    let text = fs::read_to_string(&path).io_context(|| format!("reading {}", path.display()))?;
    let bad = |reason: String| Error::Meta {
        path: path.clone(),
        reason,
    };
    let mut fields = std::collections::HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line without `=`: {line}")))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing key `{k}`")));
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| bad(format!("`{k}` is not a count")))
    };
    let (n, h, w) = (num("frames")?, num("height")?, num("width")?);
    let positions: Vec<f64> = get("positions")?
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| bad(format!("bad position `{p}`"))))
        .collect::<Result<_>>()?;
    let spec_text = get("spec")?;
    let meta: Option<SceneSpec> = if spec_text == "null" {
        None
    } else {
        Some(serde_json::from_str(spec_text).map_err(|e| bad(format!("bad spec: {e}")))?)
    };

    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let p = frame_path(dir, i);
        let img = read_ppm(&p)?;
        if img.width != w || img.height != h {
            return Err(bad(format!(
                "{} is {}x{}, expected {w}x{h}",
                p.display(),
                img.width,
                img.height
            )));
        }
        items.push(img.to_tensor::<f64>());
    }
    if items.is_empty() {
        return Err(bad("sequence has no frames".into()));
    }
    let frames = Tensor::stack(&items)?;
    FrameSequence::new(frames, positions, meta).map_err(|e| bad(e.to_string()))
}

/// One manifest line: a sequence directory (relative to the manifest) and its split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub dir: String,
    pub split: String,
}

/// Writes `dir split` lines.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        writeln!(text, "{} {}", e.dir, e.split).unwrap();
    }
    fs::write(path, text).io_context(|| format!("writing {}", path.display()))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).io_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut parts = line.split_whitespace();
            let dir = parts.next().expect("non-empty line").to_string();
            let split = parts.next().unwrap_or("train").to_string();
            if parts.next().is_some() {
                return Err(Error::Meta {
                    path: path.into(),
                    reason: format!("manifest line has extra fields: {line}"),
                });
            }
            Ok(ManifestEntry { dir, split })
        })
        .collect()
}
