//! Benign image perturbations used to probe detector robustness: block-DCT
//! compression, 3x3 Gaussian blur, down/up bilinear resizing and additive
//! Gaussian noise. Every attack keeps the input dimensions and clamps its
//! output to `[0, 1]`; borders are handled by edge replication.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::rng::gaussian_at;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerturbError {
    #[error("{kind} intensity {value} outside {range}")]
    OutOfRange {
        kind: AttackKind,
        value: f64,
        range: &'static str,
    },
    #[error("cannot parse perturbation {0:?}: expected kind:intensity[:seed]")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Compress,
    Blur,
    Resize,
    Noise,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [AttackKind::Compress, AttackKind::Blur, AttackKind::Resize, AttackKind::Noise];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Compress => "compress",
            AttackKind::Blur => "blur",
            AttackKind::Resize => "resize",
            AttackKind::Noise => "noise",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = PerturbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| PerturbError::Parse(s.to_string()))
    }
}

/// One attack at one intensity: quality for `compress`, sigma for `blur`,
/// scale for `resize`, variance for `noise`. The seed only affects `noise`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbSpec {
    pub kind: AttackKind,
    pub intensity: f64,
    pub seed: u64,
}

impl PerturbSpec {
    pub fn new(kind: AttackKind, intensity: f64) -> Self {
        Self {
            kind,
            intensity,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), PerturbError> {
        let v = self.intensity;
        let (ok, range) = match self.kind {
            AttackKind::Compress => ((1.0..=100.0).contains(&v), "[1, 100]"),
            AttackKind::Blur => (v > 0.0 && v.is_finite(), "(0, inf)"),
            AttackKind::Resize => (v > 0.0 && v <= 1.0, "(0, 1]"),
            AttackKind::Noise => (v >= 0.0 && v.is_finite(), "[0, inf)"),
        };
        if ok {
            Ok(())
        } else {
            Err(PerturbError::OutOfRange {
                kind: self.kind,
                value: v,
                range,
            })
        }
    }

    /// True when the attack leaves every image unchanged bit-for-bit.
    pub fn is_identity(&self) -> bool {
        match self.kind {
            AttackKind::Resize => self.intensity == 1.0,
            AttackKind::Noise => self.intensity == 0.0,
            _ => false,
        }
    }
}

impl fmt::Display for PerturbSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:?}", self.kind, self.intensity)?;
        if self.kind == AttackKind::Noise {
            write!(f, ":{}", self.seed)?;
        }
        Ok(())
    }
}

impl FromStr for PerturbSpec {
    type Err = PerturbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PerturbError::Parse(s.to_string());
        let mut parts = s.split(':');
        let kind: AttackKind = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let intensity: f64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let seed = match parts.next() {
            Some(t) => t.parse::<u64>().map_err(|_| bad())?,
            None => 0,
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        let spec = PerturbSpec { kind, intensity, seed };
        spec.validate()?;
        Ok(spec)
    }
}

impl Serialize for PerturbSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PerturbSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

pub fn apply(spec: &PerturbSpec, img: &Image) -> Result<Image, PerturbError> {
    match spec.kind {
        AttackKind::Compress => compress(img, spec.intensity),
        AttackKind::Blur => blur(img, spec.intensity),
        AttackKind::Resize => resize_attack(img, spec.intensity),
        AttackKind::Noise => add_noise(img, spec.intensity, spec.seed),
    }
}

// ---------------------------------------------------------------------------
// compression

/// Baseline luminance quantization table, row = vertical frequency.
pub const LUMINANCE_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Quality-scaled table: `s = 5000/Q` below 50, `200 - 2Q` otherwise, then
/// `q' = clamp(floor((q·s + 50) / 100), 1, 255)`.
pub fn scaled_quant_table(quality: f64) -> [f64; 64] {
    let s = if quality < 50.0 { 5000.0 / quality } else { 200.0 - 2.0 * quality };
    let mut out = [0.0; 64];
    for (o, &q) in out.iter_mut().zip(&LUMINANCE_QUANT) {
        *o = ((q as f64 * s + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    out
}

/// Orthonormal 8-point DCT-II basis: `basis[u][x] = c(u)/2 · cos((2x+1)uπ/16)`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let cu = if u == 0 { 1.0 / 2f64.sqrt() } else { 1.0 };
        for (x, v) in row.iter_mut().enumerate() {
            *v = cu / 2.0 * (((2 * x + 1) * u) as f64 * PI / 16.0).cos();
        }
    }
    b
}

/// Per-channel 8x8 block DCT quantization at quality `quality` in `[1, 100]`.
///
/// Samples are scaled to `[0, 255]` and level-shifted by 128 before the
/// transform. The image is edge-replicated up to a multiple of 8 and cropped
/// back afterwards.
#[allow(clippy::needless_range_loop)]
pub fn compress(img: &Image, quality: f64) -> Result<Image, PerturbError> {
    PerturbSpec::new(AttackKind::Compress, quality).validate()?;
    let table = scaled_quant_table(quality);
    let basis = dct_basis();
    let (w, h) = (img.width(), img.height());
    let (pw, ph) = (w.div_ceil(8) * 8, h.div_ceil(8) * 8);
    let mut out = vec![0.0; 3 * w * h];

    for c in 0..3 {
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                let mut block = [[0.0; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let sy = (by + y).min(h - 1);
                        let sx = (bx + x).min(w - 1);
                        *v = img.at(c, sy, sx) * 255.0 - 128.0;
                    }
                }
                // rows then columns
                let mut tmp = [[0.0; 8]; 8];
                for y in 0..8 {
                    for v in 0..8 {
                        tmp[y][v] = (0..8).map(|x| basis[v][x] * block[y][x]).sum();
                    }
                }
                let mut coef = [[0.0; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        coef[u][v] = (0..8).map(|y| basis[u][y] * tmp[y][v]).sum();
                    }
                }
                for u in 0..8 {
                    for v in 0..8 {
                        let q = table[u * 8 + v];
                        coef[u][v] = (coef[u][v] / q).round() * q;
                    }
                }
                for u in 0..8 {
                    for x in 0..8 {
                        tmp[u][x] = (0..8).map(|v| basis[v][x] * coef[u][v]).sum();
                    }
                }
                for y in 0..8 {
                    let oy = by + y;
                    if oy >= h {
                        break;
                    }
                    for x in 0..8 {
                        let ox = bx + x;
                        if ox >= w {
                            break;
                        }
                        let s: f64 = (0..8).map(|u| basis[u][y] * tmp[u][x]).sum();
                        out[(c * h + oy) * w + ox] = (s + 128.0) / 255.0;
                    }
                }
            }
        }
    }
    Ok(Image::from_unclamped(w, h, out))
}

// ---------------------------------------------------------------------------
// blur

/// Normalized 3x3 Gaussian, row-major over offsets -1..=1.
pub fn gaussian_kernel3(sigma: f64) -> [f64; 9] {
    let mut k = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            let (di, dj) = (i as f64 - 1.0, j as f64 - 1.0);
            k[i * 3 + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

pub fn blur(img: &Image, sigma: f64) -> Result<Image, PerturbError> {
    PerturbSpec::new(AttackKind::Blur, sigma).validate()?;
    Ok(Image::from_unclamped(img.width(), img.height(), blur_raw(img, sigma)))
}

pub(crate) fn blur_raw(img: &Image, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel3(sigma);
    let (w, h) = (img.width() as isize, img.height() as isize);
    let mut out = Vec::with_capacity(img.data().len());
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for i in 0..3isize {
                    let sy = (y + i - 1).clamp(0, h - 1) as usize;
                    for j in 0..3isize {
                        let sx = (x + j - 1).clamp(0, w - 1) as usize;
                        acc += k[(i * 3 + j) as usize] * img.at(c, sy, sx);
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// resize

/// Bilinear resampling with half-pixel centre alignment and edge clamping.
pub fn resample_bilinear(img: &Image, out_w: usize, out_h: usize) -> Image {
    let (in_w, in_h) = (img.width(), img.height());
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let ratio = inp as f64 / out as f64;
        (0..out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = axis(out_w, in_w);
    let ys = axis(out_h, in_h);
    let mut out = Vec::with_capacity(3 * out_w * out_h);
    for c in 0..3 {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = img.at(c, y0, x0) * (1.0 - fx) + img.at(c, y0, x1) * fx;
                let bottom = img.at(c, y1, x0) * (1.0 - fx) + img.at(c, y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Image::from_unclamped(out_w, out_h, out)
}

/// Down-samples by `scale` and back to the original size.
pub fn resize_attack(img: &Image, scale: f64) -> Result<Image, PerturbError> {
    PerturbSpec::new(AttackKind::Resize, scale).validate()?;
    let (w, h) = (img.width(), img.height());
    let sw = ((scale * w as f64).round() as usize).max(1);
    let sh = ((scale * h as f64).round() as usize).max(1);
    let small = resample_bilinear(img, sw, sh);
    Ok(resample_bilinear(&small, w, h))
}

// ---------------------------------------------------------------------------
// noise

/// Adds i.i.d. `N(0, variance)` noise from the counter-based stream keyed by
/// `seed`; value `k` of the channel-major data uses stream sample `k`.
pub fn add_noise(img: &Image, variance: f64, seed: u64) -> Result<Image, PerturbError> {
    PerturbSpec::new(AttackKind::Noise, variance).validate()?;
    if variance == 0.0 {
        return Ok(img.clone());
    }
    let sd = variance.sqrt();
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(k, v)| v + sd * gaussian_at(seed, k as u64))
        .collect();
    Ok(Image::from_unclamped(img.width(), img.height(), data))
}
