//! The frozen reference network whose neurons are monitored.
//!
//! A [`ModelGraph`] is an ordered list of layers. Convolutional and dense
//! layers are *eligible*: each of their neurons contributes one value to the
//! [`ActivationTrace`]. For a conv layer a neuron is an output channel and its
//! value is the spatial mean of that channel; for a dense layer it is the
//! output unit. Values are taken after the ReLU that immediately follows the
//! layer, if any, and from the raw layer output otherwise.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{self, conv_output_dim, ConvWeights, DenseWeights, Tensor1, Tensor3, TensorError};

const MANIFEST_FORMAT: &str = "spotter-model/1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: TensorError,
    },
    #[error("layer {index}: non-finite activation")]
    NonFinite { index: usize },
    #[error("layer {index} ({kind}) is incompatible with its input: {reason}")]
    Incompatible {
        index: usize,
        kind: &'static str,
        reason: String,
    },
    #[error("input shape mismatch: expected {expected:?}, got {actual:?}")]
    InputShape { expected: [usize; 3], actual: [usize; 3] },
    #[error("model has no convolutional or dense layers")]
    NoEligibleLayers,
    #[error("layer {index} has non-finite weights")]
    NonFiniteWeights { index: usize },
    #[error("unsupported layer kind {0:?}")]
    UnsupportedKind(String),
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("weight blob length mismatch: expected {expected} bytes, found {actual}")]
    BlobLength { expected: usize, actual: usize },
    #[error("fingerprint mismatch: manifest says {stored}, content hashes to {computed}")]
    Fingerprint { stored: String, computed: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Relu,
    Maxpool,
    Gap,
    Dense,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool => "maxpool",
            LayerKind::Gap => "gap",
            LayerKind::Dense => "dense",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        Ok(match s {
            "conv" => LayerKind::Conv,
            "relu" => LayerKind::Relu,
            "maxpool" => LayerKind::Maxpool,
            "gap" => LayerKind::Gap,
            "dense" => LayerKind::Dense,
            other => return Err(ModelError::UnsupportedKind(other.to_string())),
        })
    }

    pub fn eligible(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Dense)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        weights: ConvWeights,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool,
    GlobalAvgPool,
    Dense {
        weights: DenseWeights,
    },
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv { .. } => LayerKind::Conv,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool => LayerKind::Maxpool,
            Layer::GlobalAvgPool => LayerKind::Gap,
            Layer::Dense { .. } => LayerKind::Dense,
        }
    }

    pub fn eligible(&self) -> bool {
        self.kind().eligible()
    }

    fn param_values(&self) -> Vec<f64> {
        match self {
            Layer::Conv { weights, .. } => weights.kernel.iter().chain(&weights.bias).copied().collect(),
            Layer::Dense { weights } => weights.matrix.iter().chain(&weights.bias).copied().collect(),
            _ => Vec::new(),
        }
    }

    fn map_params(&mut self, f: impl Fn(f64) -> f64) {
        let apply = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = f(*x));
        match self {
            Layer::Conv { weights, .. } => {
                apply(&mut weights.kernel);
                apply(&mut weights.bias);
            }
            Layer::Dense { weights } => {
                apply(&mut weights.matrix);
                apply(&mut weights.bias);
            }
            _ => {}
        }
    }
}

/// An eligible layer as seen by the coverage machinery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibleLayer {
    /// Position in [`ModelGraph::layers`].
    pub layer_index: usize,
    pub neuron_count: usize,
    /// Whether a ReLU immediately follows, making every value nonnegative.
    pub post_relu: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Spatial([usize; 3]),
    Flat(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
    eligible: Vec<EligibleLayer>,
    fingerprint: String,
}

impl ModelGraph {
    /// Validates layer compatibility and fixes the content fingerprint.
    ///
    /// Parameters are rounded to `f32` precision, the precision of the weight
    /// blob, so that a save/load round trip is bit-exact.
    pub fn new(input_shape: [usize; 3], mut layers: Vec<Layer>) -> Result<Self, ModelError> {
        if input_shape.contains(&0) {
            return Err(ModelError::Malformed(format!("input shape {input_shape:?} has a zero dimension")));
        }
        for layer in &mut layers {
            layer.map_params(|v| v as f32 as f64);
        }

        let mut shape = Shape::Spatial(input_shape);
        let mut eligible = Vec::new();
        for (index, layer) in layers.iter().enumerate() {
            if !layer.param_values().iter().all(|v| v.is_finite()) {
                return Err(ModelError::NonFiniteWeights { index });
            }
            let bad = |reason: String| ModelError::Incompatible {
                index,
                kind: layer.kind().as_str(),
                reason,
            };
            shape = match (layer, shape) {
                (Layer::Conv { weights, stride, padding }, Shape::Spatial([c, h, w])) => {
                    if weights.in_channels != c {
                        return Err(bad(format!("expects {} input channels, got {c}", weights.in_channels)));
                    }
                    let oh = conv_output_dim(h, weights.kernel_h, *stride, *padding);
                    let ow = conv_output_dim(w, weights.kernel_w, *stride, *padding);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) => Shape::Spatial([weights.out_channels, oh, ow]),
                        _ => return Err(bad(format!("empty output for {h}x{w} input"))),
                    }
                }
                (Layer::MaxPool, Shape::Spatial([c, h, w])) => {
                    if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
                        return Err(bad(format!("odd spatial dims {h}x{w}")));
                    }
                    Shape::Spatial([c, h / 2, w / 2])
                }
                (Layer::GlobalAvgPool, Shape::Spatial([c, _, _])) => Shape::Flat(c),
                (Layer::Dense { weights }, Shape::Flat(n)) => {
                    if weights.in_dim != n {
                        return Err(bad(format!("expects {} inputs, got {n}", weights.in_dim)));
                    }
                    Shape::Flat(weights.out_dim)
                }
                (Layer::Relu, s) => s,
                (_, Shape::Flat(_)) => return Err(bad("needs a spatial input".into())),
                (Layer::Dense { .. }, Shape::Spatial(_)) => return Err(bad("needs a flat input".into())),
            };
            if layer.eligible() {
                let neuron_count = match shape {
                    Shape::Spatial([c, _, _]) => c,
                    Shape::Flat(n) => n,
                };
                let post_relu = matches!(layers.get(index + 1), Some(Layer::Relu));
                eligible.push(EligibleLayer {
                    layer_index: index,
                    neuron_count,
                    post_relu,
                });
            }
        }
        if eligible.is_empty() {
            return Err(ModelError::NoEligibleLayers);
        }

        let (entries, blob) = encode(input_shape, &layers);
        let fingerprint = fingerprint(input_shape, &entries, &blob);
        Ok(Self {
            input_shape,
            layers,
            eligible,
            fingerprint,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn eligible_layers(&self) -> &[EligibleLayer] {
        &self.eligible
    }

    pub fn neuron_counts(&self) -> Vec<usize> {
        self.eligible.iter().map(|l| l.neuron_count).collect()
    }

    /// Hex SHA-256 over the canonical layer manifest and the weight blob.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Runs the network and records one value per neuron of every eligible layer.
    pub fn forward_with_trace(&self, image: &Tensor3) -> Result<ActivationTrace, ModelError> {
        if image.shape() != self.input_shape {
            return Err(ModelError::InputShape {
                expected: self.input_shape,
                actual: image.shape(),
            });
        }
        let mut act = Activation::Spatial(image.clone());
        let mut layers = Vec::with_capacity(self.eligible.len());
        let mut pending: Option<usize> = None;

        for (index, layer) in self.layers.iter().enumerate() {
            let err = |source| ModelError::Layer { index, source };
            act = match (layer, act) {
                (Layer::Conv { weights, stride, padding }, Activation::Spatial(x)) => {
                    Activation::Spatial(tensor::conv2d(&x, weights, *stride, *padding).map_err(err)?)
                }
                (Layer::Relu, Activation::Spatial(x)) => Activation::Spatial(tensor::relu3(&x)),
                (Layer::Relu, Activation::Flat(x)) => Activation::Flat(tensor::relu1(&x)),
                (Layer::MaxPool, Activation::Spatial(x)) => Activation::Spatial(tensor::maxpool2(&x).map_err(err)?),
                (Layer::GlobalAvgPool, Activation::Spatial(x)) => Activation::Flat(tensor::global_avg_pool(&x)),
                (Layer::Dense { weights }, Activation::Flat(x)) => Activation::Flat(tensor::dense(&x, weights).map_err(err)?),
                (layer, _) => {
                    return Err(ModelError::Incompatible {
                        index,
                        kind: layer.kind().as_str(),
                        reason: "activation rank does not match layer".into(),
                    })
                }
            };
            if !act.values().iter().all(|v| v.is_finite()) {
                return Err(ModelError::NonFinite { index });
            }

            if layer.eligible() {
                pending = Some(index);
            }
            // Record once the optional trailing ReLU has been applied.
            let next_is_relu = matches!(self.layers.get(index + 1), Some(Layer::Relu));
            if let Some(source_index) = pending {
                if !(source_index == index && next_is_relu) {
                    layers.push(LayerActivation {
                        layer_index: source_index,
                        values: act.neuron_values(),
                    });
                    pending = None;
                }
            }
        }

        Ok(ActivationTrace {
            model_fingerprint: self.fingerprint.clone(),
            layers,
        })
    }
}

enum Activation {
    Spatial(Tensor3),
    Flat(Tensor1),
}

impl Activation {
    fn values(&self) -> &[f64] {
        match self {
            Activation::Spatial(t) => t.data(),
            Activation::Flat(t) => t.data(),
        }
    }

    fn neuron_values(&self) -> Vec<f64> {
        match self {
            Activation::Spatial(t) => tensor::global_avg_pool(t).into_data(),
            Activation::Flat(t) => t.data().to_vec(),
        }
    }
}

/// Neuron outputs of one eligible layer for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivation {
    pub layer_index: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub model_fingerprint: String,
    pub layers: Vec<LayerActivation>,
}

/// High-pass 3x3 filters wired into the first conv of the toy backbone: a
/// Laplacian and horizontal, vertical and diagonal differences.
pub const HIGH_PASS_FILTERS: [[f64; 9]; 4] = [
    [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0],
];

/// Each filter appears once per gain. Against a single per-layer threshold,
/// the number of active high-pass channels then grows with the log of the
/// high-frequency energy instead of switching once.
pub const HIGH_PASS_GAINS: [f64; 3] = [1.0, 4.0, 16.0];

pub const TOY_INPUT_SHAPE: [usize; 3] = [3, 32, 32];

/// Deterministic desk-scale stand-in for a face-recognition backbone.
///
/// `3x32x32 → conv16 → relu → pool → conv32 → relu → pool → conv64 → relu →
/// gap → dense32 → relu → dense8`, all convs 3x3 with stride 1 and padding 1.
/// The first 12 conv1 channels are the fixed high-pass bank; the remaining
/// weights are He-scaled Gaussians, biases are zero.
pub fn make_toy_backbone(seed: u64) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = |n: usize, fan_in: usize| -> Vec<f64> {
        let scale = (2.0 / fan_in as f64).sqrt();
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect()
    };
    let mut conv = |out_c: usize, in_c: usize| -> Layer {
        let weights = ConvWeights::new(
            out_c,
            in_c,
            3,
            3,
            gaussian(out_c * in_c * 9, in_c * 9),
            vec![0.0; out_c],
        )
        .expect("toy conv dims are consistent");
        Layer::Conv {
            weights,
            stride: 1,
            padding: 1,
        }
    };

    let mut first = conv(16, 3);
    if let Layer::Conv { weights, .. } = &mut first {
        for (g, gain) in HIGH_PASS_GAINS.iter().enumerate() {
            for (f, filter) in HIGH_PASS_FILTERS.iter().enumerate() {
                let o = g * HIGH_PASS_FILTERS.len() + f;
                for c in 0..3 {
                    let base = (o * 3 + c) * 9;
                    for (k, v) in filter.iter().enumerate() {
                        weights.kernel[base + k] = gain * v / 3.0;
                    }
                }
            }
        }
    }
    let conv2 = conv(32, 16);
    let conv3 = conv(64, 32);
    let mut dense = |out: usize, inp: usize| -> Layer {
        Layer::Dense {
            weights: DenseWeights::new(out, inp, gaussian(out * inp, inp), vec![0.0; out])
                .expect("toy dense dims are consistent"),
        }
    };
    let d1 = dense(32, 64);
    let d2 = dense(8, 32);

    let layers = vec![
        first,
        Layer::Relu,
        Layer::MaxPool,
        conv2,
        Layer::Relu,
        Layer::MaxPool,
        conv3,
        Layer::Relu,
        Layer::GlobalAvgPool,
        d1,
        Layer::Relu,
        d2,
    ];
    ModelGraph::new(TOY_INPUT_SHAPE, layers).expect("toy backbone is well-formed")
}

// ---------------------------------------------------------------------------
// Manifest + blob persistence

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerEntry {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel_h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel_w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_dim: Option<usize>,
    /// Byte offset of this layer's parameters in the blob.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_bytes: Option<usize>,
}

impl LayerEntry {
    fn bare(kind: LayerKind) -> Self {
        Self {
            kind: kind.as_str().to_string(),
            out_channels: None,
            in_channels: None,
            kernel_h: None,
            kernel_w: None,
            stride: None,
            padding: None,
            out_dim: None,
            in_dim: None,
            weight_offset: None,
            weight_bytes: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    input_shape: [usize; 3],
    weights_file: String,
    weights_bytes: usize,
    fingerprint: String,
    layers: Vec<LayerEntry>,
}

fn encode(_input_shape: [usize; 3], layers: &[Layer]) -> (Vec<LayerEntry>, Vec<u8>) {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(layers.len());
    for layer in layers {
        let mut e = LayerEntry::bare(layer.kind());
        match layer {
            Layer::Conv { weights, stride, padding } => {
                e.out_channels = Some(weights.out_channels);
                e.in_channels = Some(weights.in_channels);
                e.kernel_h = Some(weights.kernel_h);
                e.kernel_w = Some(weights.kernel_w);
                e.stride = Some(*stride);
                e.padding = Some(*padding);
            }
            Layer::Dense { weights } => {
                e.out_dim = Some(weights.out_dim);
                e.in_dim = Some(weights.in_dim);
            }
            _ => {}
        }
        if layer.eligible() {
            let params = layer.param_values();
            e.weight_offset = Some(blob.len());
            e.weight_bytes = Some(params.len() * 4);
            for v in params {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        entries.push(e);
    }
    (entries, blob)
}

fn fingerprint(input_shape: [usize; 3], entries: &[LayerEntry], blob: &[u8]) -> String {
    let canonical = serde_json::to_vec(&(input_shape, entries)).expect("manifest entries serialize");
    let mut h = Sha256::new();
    h.update(&canonical);
    h.update(blob);
    hex::encode(h.finalize())
}

fn blob_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `path` (JSON manifest) and a sibling `.bin` weight blob.
pub fn save_model(model: &ModelGraph, path: &Path) -> Result<(), ModelError> {
    let (entries, blob) = encode(model.input_shape, &model.layers);
    let blob_path = blob_path_for(path);
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        input_shape: model.input_shape,
        weights_file: blob_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        weights_bytes: blob.len(),
        fingerprint: model.fingerprint.clone(),
        layers: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(path, json + "\n").map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(&blob_path, &blob).map_err(|source| ModelError::Io { path: blob_path, source })
}

pub fn load_model(path: &Path) -> Result<ModelGraph, ModelError> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| ModelError::Malformed(e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(ModelError::Malformed(format!("unknown format {:?}", manifest.format)));
    }
    let blob_path = path.parent().unwrap_or(Path::new(".")).join(&manifest.weights_file);
    let blob = fs::read(&blob_path).map_err(|source| ModelError::Io { path: blob_path, source })?;
    model_from_manifest(manifest, &blob)
}

fn model_from_manifest(manifest: Manifest, blob: &[u8]) -> Result<ModelGraph, ModelError> {
    if blob.len() != manifest.weights_bytes {
        return Err(ModelError::BlobLength {
            expected: manifest.weights_bytes,
            actual: blob.len(),
        });
    }
    let need = |v: Option<usize>, field: &str, i: usize| {
        v.ok_or_else(|| ModelError::Malformed(format!("layer {i}: missing {field}")))
    };
    let mut cursor = 0usize;
    let mut read_params = |e: &LayerEntry, i: usize, count: usize| -> Result<Vec<f64>, ModelError> {
        let offset = need(e.weight_offset, "weight_offset", i)?;
        let bytes = need(e.weight_bytes, "weight_bytes", i)?;
        if bytes != count * 4 {
            return Err(ModelError::Malformed(format!(
                "layer {i}: weight_bytes {bytes} does not match {count} parameters"
            )));
        }
        if offset != cursor {
            return Err(ModelError::Malformed(format!(
                "layer {i}: weight_offset {offset}, expected {cursor}"
            )));
        }
        let end = offset + bytes;
        if end > blob.len() {
            return Err(ModelError::BlobLength {
                expected: end,
                actual: blob.len(),
            });
        }
        cursor = end;
        Ok(blob[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, e) in manifest.layers.iter().enumerate() {
        let layer = match LayerKind::parse(&e.kind)? {
            LayerKind::Conv => {
                let (oc, ic) = (need(e.out_channels, "out_channels", i)?, need(e.in_channels, "in_channels", i)?);
                let (kh, kw) = (need(e.kernel_h, "kernel_h", i)?, need(e.kernel_w, "kernel_w", i)?);
                let n = oc * ic * kh * kw;
                let mut params = read_params(e, i, n + oc)?;
                let bias = params.split_off(n);
                Layer::Conv {
                    weights: ConvWeights::new(oc, ic, kh, kw, params, bias)
                        .map_err(|source| ModelError::Layer { index: i, source })?,
                    stride: need(e.stride, "stride", i)?,
                    padding: need(e.padding, "padding", i)?,
                }
            }
            LayerKind::Dense => {
                let (od, id) = (need(e.out_dim, "out_dim", i)?, need(e.in_dim, "in_dim", i)?);
                let n = od * id;
                let mut params = read_params(e, i, n + od)?;
                let bias = params.split_off(n);
                Layer::Dense {
                    weights: DenseWeights::new(od, id, params, bias)
                        .map_err(|source| ModelError::Layer { index: i, source })?,
                }
            }
            LayerKind::Relu => Layer::Relu,
            LayerKind::Maxpool => Layer::MaxPool,
            LayerKind::Gap => Layer::GlobalAvgPool,
        };
        layers.push(layer);
    }
    if cursor != blob.len() {
        return Err(ModelError::BlobLength {
            expected: cursor,
            actual: blob.len(),
        });
    }
    let model = ModelGraph::new(manifest.input_shape, layers)?;
    if model.fingerprint != manifest.fingerprint {
        return Err(ModelError::Fingerprint {
            stored: manifest.fingerprint,
            computed: model.fingerprint,
        });
    }
    Ok(model)
}
