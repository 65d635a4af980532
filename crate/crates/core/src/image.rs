//! RGB images with values in `[0, 1]`, and binary PPM (P6) / PGM (P5) I/O.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{Tensor3, TensorError};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyDimension { width: usize, height: usize },
    #[error("image data length {actual}, expected {expected}")]
    Length { expected: usize, actual: usize },
    #[error("pixel value {value} at index {index} outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("bad magic {0:?}, expected P6 or P5")]
    BadMagic(String),
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("unsupported maxval {0}, only 255 is accepted")]
    MaxVal(u32),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Three-channel image, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyDimension { width, height });
        }
        if data.len() != 3 * width * height {
            return Err(ImageError::Length {
                expected: 3 * width * height,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::OutOfRange { index, value });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(width, height, vec![value; 3 * width * height])
    }

    /// Clamps every value to `[0, 1]`; used by transforms that may overshoot.
    pub(crate) fn from_unclamped(width: usize, height: usize, mut data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), 3 * width * height);
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Result<Tensor3, TensorError> {
        Tensor3::new(3, self.height, self.width, self.data.clone())
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encodes as binary P6 with maxval 255.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    let plane = img.width * img.height;
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(img.data[c * plane + i]));
        }
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, ImageError> {
    let mut pos = 0usize;
    let mut token = || -> Result<String, ImageError> {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::BadHeader("unexpected end of header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token()?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        _ => return Err(ImageError::BadMagic(magic)),
    };
    let mut number = |what: &str| -> Result<u32, ImageError> {
        let t = token()?;
        t.parse::<u32>()
            .map_err(|_| ImageError::BadHeader(format!("{what} {t:?} is not a number")))
    };
    let width = number("width")? as usize;
    let height = number("height")? as usize;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(ImageError::MaxVal(maxval));
    }
    if width == 0 || height == 0 {
        return Err(ImageError::EmptyDimension { width, height });
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = bytes.get(pos + 1..).unwrap_or(&[]);
    let plane = width * height;
    let expected = plane * channels;
    if raster.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            actual: raster.len(),
        });
    }
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            let b = if channels == 3 { raster[i * 3 + c] } else { raster[i] };
            data[c * plane + i] = b as f64 / 255.0;
        }
    }
    Ok(Image { width, height, data })
}

pub fn read_ppm(path: &Path) -> Result<Image, ImageError> {
    let bytes = fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_ppm(&bytes)
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<(), ImageError> {
    fs::write(path, encode_ppm(img)).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })
}
