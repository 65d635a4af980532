//! Dense f64 kernels over small tensors: convolution, pooling, fully-connected
//! layers and ReLU.
//!
//! All tensors are stored channel-major, then row-major: element `(c, y, x)`
//! lives at `c * height * width + y * width + x`. The same layout is used by
//! every serialized artifact in the crate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{what}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{what}: dimensions must be positive, got {dims:?}")]
    EmptyDimension { what: &'static str, dims: Vec<usize> },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("maxpool2 needs even spatial dims, got {height}x{width}")]
    OddPoolInput { height: usize, width: usize },
    #[error("conv2d output would be empty for input {height}x{width}, kernel {kernel_h}x{kernel_w}, stride {stride}, padding {padding}")]
    EmptyOutput {
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
}

fn check_finite(data: &[f64]) -> Result<(), TensorError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite { index }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(TensorError::EmptyDimension {
                what: "tensor3",
                dims: vec![channels, height, width],
            });
        }
        if data.len() != channels * height * width {
            return Err(TensorError::ShapeMismatch {
                what: "tensor3 data length",
                expected: vec![channels * height * width],
                actual: vec![data.len()],
            });
        }
        check_finite(&data)?;
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self, TensorError> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    /// Builds without validation; callers guarantee the invariants.
    fn from_parts(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor1 {
    data: Vec<f64>,
}

impl Tensor1 {
    pub fn new(data: Vec<f64>) -> Result<Self, TensorError> {
        if data.is_empty() {
            return Err(TensorError::EmptyDimension {
                what: "tensor1",
                dims: vec![0],
            });
        }
        check_finite(&data)?;
        Ok(Self { data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Kernel laid out as `[out][in][kh][kw]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvWeights {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvWeights {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        kernel: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self, TensorError> {
        let dims = vec![out_channels, in_channels, kernel_h, kernel_w];
        if dims.contains(&0) {
            return Err(TensorError::EmptyDimension { what: "conv weights", dims });
        }
        let count = out_channels * in_channels * kernel_h * kernel_w;
        if kernel.len() != count {
            return Err(TensorError::ShapeMismatch {
                what: "conv kernel value count",
                expected: vec![count],
                actual: vec![kernel.len()],
            });
        }
        if bias.len() != out_channels {
            return Err(TensorError::ShapeMismatch {
                what: "conv bias length",
                expected: vec![out_channels],
                actual: vec![bias.len()],
            });
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            kernel,
            bias,
        })
    }

    #[inline]
    pub fn k(&self, o: usize, c: usize, i: usize, j: usize) -> f64 {
        self.kernel[((o * self.in_channels + c) * self.kernel_h + i) * self.kernel_w + j]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

/// Row-major `[out][in]` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseWeights {
    pub out_dim: usize,
    pub in_dim: usize,
    pub matrix: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseWeights {
    pub fn new(out_dim: usize, in_dim: usize, matrix: Vec<f64>, bias: Vec<f64>) -> Result<Self, TensorError> {
        if out_dim == 0 || in_dim == 0 {
            return Err(TensorError::EmptyDimension {
                what: "dense weights",
                dims: vec![out_dim, in_dim],
            });
        }
        if matrix.len() != out_dim * in_dim {
            return Err(TensorError::ShapeMismatch {
                what: "dense matrix value count",
                expected: vec![out_dim * in_dim],
                actual: vec![matrix.len()],
            });
        }
        if bias.len() != out_dim {
            return Err(TensorError::ShapeMismatch {
                what: "dense bias length",
                expected: vec![out_dim],
                actual: vec![bias.len()],
            });
        }
        Ok(Self {
            out_dim,
            in_dim,
            matrix,
            bias,
        })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            out_dim,
            in_dim,
            matrix: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.matrix[o * self.in_dim..(o + 1) * self.in_dim]
    }

    pub fn is_finite(&self) -> bool {
        self.matrix.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Output spatial size of a convolution, or `None` if it would be empty.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Zero-padded 2-D cross-correlation.
pub fn conv2d(input: &Tensor3, w: &ConvWeights, stride: usize, padding: usize) -> Result<Tensor3, TensorError> {
    if input.channels != w.in_channels {
        return Err(TensorError::ShapeMismatch {
            what: "conv2d input channels",
            expected: vec![w.in_channels],
            actual: vec![input.channels],
        });
    }
    let empty = || TensorError::EmptyOutput {
        height: input.height,
        width: input.width,
        kernel_h: w.kernel_h,
        kernel_w: w.kernel_w,
        stride,
        padding,
    };
    let out_h = conv_output_dim(input.height, w.kernel_h, stride, padding).ok_or_else(empty)?;
    let out_w = conv_output_dim(input.width, w.kernel_w, stride, padding).ok_or_else(empty)?;

    // Each output accumulates bias, then channel/row/column taps in order;
    // looping taps outermost keeps that order while the inner loop runs
    // along an output row.
    let pad = padding as isize;
    let (h, wd) = (input.height as isize, input.width as isize);
    let plane_len = out_h * out_w;
    let mut out = vec![0.0; w.out_channels * plane_len];
    for o in 0..w.out_channels {
        let dst = &mut out[o * plane_len..(o + 1) * plane_len];
        dst.iter_mut().for_each(|v| *v = w.bias[o]);
        for c in 0..w.in_channels {
            let plane = input.channel(c);
            for i in 0..w.kernel_h {
                for j in 0..w.kernel_w {
                    let k = w.k(o, c, i, j);
                    // output columns whose tap lands inside the input
                    let x_of = |ox: usize| (ox * stride + j) as isize - pad;
                    let ox_lo = (0..out_w).find(|&ox| x_of(ox) >= 0).unwrap_or(out_w);
                    let ox_hi = (0..out_w).rev().find(|&ox| x_of(ox) < wd).map_or(0, |v| v + 1);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..out_h {
                        let y = (oy * stride + i) as isize - pad;
                        if y < 0 || y >= h {
                            continue;
                        }
                        let row = &plane[(y as usize) * input.width..(y as usize + 1) * input.width];
                        let drow = &mut dst[oy * out_w..(oy + 1) * out_w];
                        if stride == 1 {
                            let x0 = x_of(ox_lo) as usize;
                            let n = ox_hi - ox_lo;
                            for (d, &s) in drow[ox_lo..ox_hi].iter_mut().zip(&row[x0..x0 + n]) {
                                *d += s * k;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                drow[ox] += row[x_of(ox) as usize] * k;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor3::from_parts(w.out_channels, out_h, out_w, out))
}

pub fn relu3(x: &Tensor3) -> Tensor3 {
    Tensor3::from_parts(x.channels, x.height, x.width, relu_slice(&x.data))
}

pub fn relu1(x: &Tensor1) -> Tensor1 {
    Tensor1 {
        data: relu_slice(&x.data),
    }
}

fn relu_slice(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect()
}

/// 2x2 max pooling with stride 2.
pub fn maxpool2(x: &Tensor3) -> Result<Tensor3, TensorError> {
    if !x.height.is_multiple_of(2) || !x.width.is_multiple_of(2) {
        return Err(TensorError::OddPoolInput {
            height: x.height,
            width: x.width,
        });
    }
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut out = Vec::with_capacity(x.channels * oh * ow);
    for c in 0..x.channels {
        for y in 0..oh {
            for xx in 0..ow {
                let m = x
                    .at(c, 2 * y, 2 * xx)
                    .max(x.at(c, 2 * y, 2 * xx + 1))
                    .max(x.at(c, 2 * y + 1, 2 * xx))
                    .max(x.at(c, 2 * y + 1, 2 * xx + 1));
                out.push(m);
            }
        }
    }
    Ok(Tensor3::from_parts(x.channels, oh, ow, out))
}

/// Per-channel spatial mean.
pub fn global_avg_pool(x: &Tensor3) -> Tensor1 {
    let plane = (x.height * x.width) as f64;
    Tensor1 {
        data: (0..x.channels).map(|c| x.channel(c).iter().sum::<f64>() / plane).collect(),
    }
}

pub fn dense(x: &Tensor1, w: &DenseWeights) -> Result<Tensor1, TensorError> {
    if x.len() != w.in_dim {
        return Err(TensorError::ShapeMismatch {
            what: "dense input length",
            expected: vec![w.in_dim],
            actual: vec![x.len()],
        });
    }
    Ok(Tensor1 {
        data: dense_slice(&x.data, w),
    })
}

/// `W·x + b` on raw slices; the caller checks `x.len() == w.in_dim`.
pub(crate) fn dense_slice(x: &[f64], w: &DenseWeights) -> Vec<f64> {
    (0..w.out_dim)
        .map(|o| {
            let row = w.row(o);
            w.bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}
