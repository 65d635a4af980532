//! Shallow fully-connected binary classifier over coverage vectors.
//!
//! Five dense stages `m → 64 → 32 → 16 → 8 → 1` with ReLU between them and a
//! sigmoid output giving the probability that a sample is fake. Inputs are
//! z-scored with [`FeatureStats`] fit on the training features.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coverage::{CoverageVector, Label};
use crate::rng::derive_seed;
use crate::tensor::{dense_slice, DenseWeights};

pub const HIDDEN_WIDTHS: [usize; 4] = [64, 32, 16, 8];
pub const STD_FLOOR: f64 = 1e-8;
pub const LOGIT_CLAMP: f64 = 30.0;
const FILE_FORMAT: &str = "spotter-classifier/1";

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("no feature vectors given")]
    Empty,
    #[error("training needs both classes, got {real} real and {fake} fake")]
    SingleClass { real: usize, fake: usize },
    #[error("sample {index} has no label")]
    Unlabeled { index: usize },
    #[error("feature dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("malformed classifier file: {0}")]
    Malformed(String),
    #[error("weight blob length mismatch: expected {expected} bytes, found {actual}")]
    BlobLength { expected: usize, actual: usize },
    #[error("weight blob checksum mismatch")]
    Checksum,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Per-dimension mean and population standard deviation (floored at 1e-8).
pub fn fit_feature_stats(features: &[CoverageVector]) -> Result<FeatureStats, ClassifierError> {
    let rows: Vec<Vec<f64>> = features.iter().map(|f| f.as_f64()).collect();
    fit_stats_rows(&rows)
}

pub(crate) fn fit_stats_rows(rows: &[Vec<f64>]) -> Result<FeatureStats, ClassifierError> {
    let first = rows.first().ok_or(ClassifierError::Empty)?;
    let m = first.len();
    if let Some(bad) = rows.iter().find(|r| r.len() != m) {
        return Err(ClassifierError::Dimension {
            expected: m,
            actual: bad.len(),
        });
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; m];
    for r in rows {
        for (acc, v) in mean.iter_mut().zip(r) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0; m];
    for r in rows {
        for ((acc, v), mu) in var.iter_mut().zip(r).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    Ok(FeatureStats { mean, std })
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy as a function of the logit: `softplus(z) - y·z`.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// `-[y ln p + (1-y) ln(1-p)]`, evaluated through the logit of `p`.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let z = p.ln() - (-p).ln_1p();
    bce_with_logit(z, y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    stages: Vec<DenseWeights>,
}

impl MlpParams {
    pub fn widths(input_dim: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend(HIDDEN_WIDTHS);
        w.push(1);
        w
    }

    pub fn from_stages(stages: Vec<DenseWeights>) -> Result<Self, ClassifierError> {
        if stages.len() != HIDDEN_WIDTHS.len() + 1 {
            return Err(ClassifierError::Malformed(format!("expected 5 stages, got {}", stages.len())));
        }
        let widths = Self::widths(stages[0].in_dim);
        for (k, s) in stages.iter().enumerate() {
            if s.in_dim != widths[k] || s.out_dim != widths[k + 1] {
                return Err(ClassifierError::Malformed(format!(
                    "stage {k} is {}x{}, expected {}x{}",
                    s.out_dim,
                    s.in_dim,
                    widths[k + 1],
                    widths[k]
                )));
            }
            if !s.is_finite() {
                return Err(ClassifierError::Malformed(format!("stage {k} has non-finite weights")));
            }
        }
        Ok(Self { stages })
    }

    pub fn zeros(input_dim: usize) -> Self {
        let w = Self::widths(input_dim);
        Self {
            stages: w.windows(2).map(|p| DenseWeights::zeros(p[1], p[0])).collect(),
        }
    }

    /// Uniform `±sqrt(6 / fan_in)` weights, zero biases.
    pub fn init(input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(input_dim);
        for s in &mut p.stages {
            let limit = (6.0 / s.in_dim as f64).sqrt();
            s.matrix.iter_mut().for_each(|v| *v = rng.random_range(-limit..limit));
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.stages[0].in_dim
    }

    pub fn stages(&self) -> &[DenseWeights] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [DenseWeights] {
        &mut self.stages
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(|s| s.matrix.len() + s.bias.len()).sum()
    }

    /// Parameters in storage order: per stage, matrix then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        self.stages
            .iter()
            .flat_map(|s| s.matrix.iter().chain(&s.bias).copied())
            .collect()
    }

    pub fn from_flat(input_dim: usize, flat: &[f64]) -> Result<Self, ClassifierError> {
        let mut p = Self::zeros(input_dim);
        if flat.len() != p.param_count() {
            return Err(ClassifierError::Malformed(format!(
                "expected {} parameters, got {}",
                p.param_count(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for s in &mut p.stages {
            s.matrix.iter_mut().chain(s.bias.iter_mut()).for_each(|v| *v = it.next().unwrap());
        }
        Self::from_stages(p.stages)
    }

    /// Raw (unclamped) output logit for an already standardized input.
    pub fn logit(&self, x: &[f64]) -> f64 {
        let mut a = x.to_vec();
        let last = self.stages.len() - 1;
        for (k, s) in self.stages.iter().enumerate() {
            a = dense_slice(&a, s);
            if k < last {
                a.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        a[0]
    }

    /// Mean BCE over the samples and its exact gradient.
    pub fn loss_and_gradient(&self, xs: &[Vec<f64>], ys: &[f64]) -> (f64, MlpParams) {
        let mut grad = Self::zeros(self.input_dim());
        let mut loss = 0.0;
        let n = xs.len() as f64;
        for (x, &y) in xs.iter().zip(ys) {
            loss += self.accumulate_sample(x, y, 1.0 / n, &mut grad);
        }
        (loss / n, grad)
    }

    /// Adds `weight · ∂loss/∂θ` for one sample into `grad` and returns its loss.
    fn accumulate_sample(&self, x: &[f64], y: f64, weight: f64, grad: &mut MlpParams) -> f64 {
        let last = self.stages.len() - 1;
        // inputs[k] feeds stage k; pre[k] is its pre-activation.
        let mut inputs = Vec::with_capacity(self.stages.len());
        let mut pre = Vec::with_capacity(self.stages.len());
        let mut a = x.to_vec();
        for (k, s) in self.stages.iter().enumerate() {
            let z = dense_slice(&a, s);
            inputs.push(a);
            a = if k < last { z.iter().map(|v| v.max(0.0)).collect() } else { z.clone() };
            pre.push(z);
        }
        let logit = pre[last][0];
        let loss = bce_with_logit(logit, y);

        let mut delta = vec![(sigmoid(logit) - y) * weight];
        for k in (0..self.stages.len()).rev() {
            let s = &self.stages[k];
            let g = &mut grad.stages[k];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.matrix[o * s.in_dim..(o + 1) * s.in_dim];
                for (gw, xin) in row.iter_mut().zip(&inputs[k]) {
                    *gw += d * xin;
                }
            }
            if k == 0 {
                break;
            }
            let mut next = vec![0.0; s.in_dim];
            for (o, d) in delta.iter().enumerate() {
                for (nv, w) in next.iter_mut().zip(s.row(o)) {
                    *nv += d * w;
                }
            }
            for (nv, z) in next.iter_mut().zip(&pre[k - 1]) {
                if *z <= 0.0 {
                    *nv = 0.0;
                }
            }
            delta = next;
        }
        loss
    }
}

fn check_dim(stats: &FeatureStats, x: &CoverageVector) -> Result<(), ClassifierError> {
    if x.len() != stats.dim() {
        return Err(ClassifierError::Dimension {
            expected: stats.dim(),
            actual: x.len(),
        });
    }
    Ok(())
}

/// Probability that `x` is fake; the logit is clamped to `[-30, 30]`.
pub fn mlp_forward(params: &MlpParams, stats: &FeatureStats, x: &CoverageVector) -> Result<f64, ClassifierError> {
    check_dim(stats, x)?;
    if params.input_dim() != stats.dim() {
        return Err(ClassifierError::Dimension {
            expected: params.input_dim(),
            actual: stats.dim(),
        });
    }
    let z = params.logit(&stats.standardize(&x.as_f64()));
    Ok(sigmoid(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub tag: Label,
    pub p: f64,
}

/// Fake iff `p > 0.5`; an exact tie is tagged real.
pub fn predict(params: &MlpParams, stats: &FeatureStats, x: &CoverageVector) -> Result<Prediction, ClassifierError> {
    let p = mlp_forward(params, stats, x)?;
    Ok(Prediction {
        tag: if p > 0.5 { Label::Fake } else { Label::Real },
        p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    /// Inverse-time decay: `lr_t = base_lr / (1 + decay · t)`, `t` = update count.
    pub decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            momentum: 0.9,
            decay: 1e-6,
            batch_size: 32,
            max_epochs: 300,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(ClassifierError::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ClassifierError::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(ClassifierError::Config(format!("decay must be nonnegative, got {}", self.decay)));
        }
        if self.batch_size == 0 {
            return Err(ClassifierError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, update: u64) -> f64 {
        self.base_lr / (1.0 + self.decay * update as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: MlpParams,
    pub stats: FeatureStats,
    pub history: Vec<EpochRecord>,
}

/// Mini-batch SGD with momentum on mean BCE.
///
/// `v ← μ·v − lr_t·∇`, `θ ← θ + v`. Loss and accuracy in the history are
/// accumulated over the forward passes of each epoch.
pub fn train(features: &[CoverageVector], config: &TrainConfig) -> Result<Trained, ClassifierError> {
    config.validate()?;
    let stats = fit_feature_stats(features)?;
    let ys = labels_of(features)?;
    let xs: Vec<Vec<f64>> = features.iter().map(|f| stats.standardize(&f.as_f64())).collect();
    let (params, history) = train_standardized(&xs, &ys, config)?;
    Ok(Trained { params, stats, history })
}

fn labels_of(features: &[CoverageVector]) -> Result<Vec<f64>, ClassifierError> {
    let ys = features
        .iter()
        .enumerate()
        .map(|(index, f)| f.label.map(Label::as_target).ok_or(ClassifierError::Unlabeled { index }))
        .collect::<Result<Vec<_>, _>>()?;
    let fake = ys.iter().filter(|&&y| y == 1.0).count();
    let real = ys.len() - fake;
    if fake == 0 || real == 0 {
        return Err(ClassifierError::SingleClass { real, fake });
    }
    Ok(ys)
}

pub(crate) fn train_standardized(
    xs: &[Vec<f64>],
    ys: &[f64],
    config: &TrainConfig,
) -> Result<(MlpParams, Vec<EpochRecord>), ClassifierError> {
    let m = xs.first().ok_or(ClassifierError::Empty)?.len();
    let mut params = MlpParams::init(m, derive_seed(config.seed, "init"));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle"));
    let mut velocity = MlpParams::zeros(m);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut update: u64 = 0;
    let mut history = Vec::with_capacity(config.max_epochs);

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut lr = config.lr_at(update);
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let mut grad = MlpParams::zeros(m);
            let w = 1.0 / idx.len() as f64;
            let mut batch_loss = 0.0;
            for &i in idx {
                let z = params.logit(&xs[i]);
                if (z > 0.0) == (ys[i] == 1.0) {
                    correct += 1;
                }
                batch_loss += params.accumulate_sample(&xs[i], ys[i], w, &mut grad);
            }
            if !batch_loss.is_finite() {
                return Err(ClassifierError::NonFiniteLoss { epoch, batch });
            }
            loss_sum += batch_loss;

            lr = config.lr_at(update);
            for ((p, v), g) in params.stages.iter_mut().zip(&mut velocity.stages).zip(&grad.stages) {
                let pv = p.matrix.iter_mut().chain(p.bias.iter_mut());
                let vv = v.matrix.iter_mut().chain(v.bias.iter_mut());
                let gv = g.matrix.iter().chain(&g.bias);
                for ((p, v), g) in pv.zip(vv).zip(gv) {
                    *v = config.momentum * *v - lr * g;
                    *p += *v;
                }
            }
            update += 1;
        }
        let n = xs.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / n,
            accuracy: correct as f64 / n,
            lr,
        };
        log::debug!(
            "epoch {} loss {:.6} acc {:.4}",
            record.epoch,
            record.mean_loss,
            record.accuracy
        );
        history.push(record);
    }
    Ok((params, history))
}

// ---------------------------------------------------------------------------
// Persistence: one JSON header line, then little-endian f64 weights.

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub params: MlpParams,
    pub stats: FeatureStats,
    pub config: TrainConfig,
    /// Fingerprint of the backbone whose coverage features this was trained on.
    pub model_fingerprint: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    feature_dim: usize,
    widths: Vec<usize>,
    seed: u64,
    train_config: TrainConfig,
    feature_stats: FeatureStats,
    #[serde(default)]
    model_fingerprint: Option<String>,
    weight_count: usize,
    blob_bytes: usize,
    blob_sha256: String,
}

impl Classifier {
    pub fn predict(&self, x: &CoverageVector) -> Result<Prediction, ClassifierError> {
        predict(&self.params, &self.stats, x)
    }

    pub fn feature_dim(&self) -> usize {
        self.stats.dim()
    }

    /// Fails if the classifier expects a different feature dimension.
    pub fn check_dim(&self, m: usize) -> Result<(), ClassifierError> {
        if self.feature_dim() != m {
            return Err(ClassifierError::Dimension {
                expected: m,
                actual: self.feature_dim(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let blob: Vec<u8> = self.params.to_flat().iter().flat_map(|v| v.to_le_bytes()).collect();
        let header = Header {
            format: FILE_FORMAT.into(),
            feature_dim: self.feature_dim(),
            widths: MlpParams::widths(self.feature_dim()),
            seed: self.config.seed,
            train_config: self.config.clone(),
            feature_stats: self.stats.clone(),
            model_fingerprint: self.model_fingerprint.clone(),
            weight_count: self.params.param_count(),
            blob_bytes: blob.len(),
            blob_sha256: hex::encode(Sha256::digest(&blob)),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.extend(blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ClassifierError> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ClassifierError::Malformed("missing header line".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[..split]).map_err(|e| ClassifierError::Malformed(e.to_string()))?;
        if header.format != FILE_FORMAT {
            return Err(ClassifierError::Malformed(format!("unknown format {:?}", header.format)));
        }
        let m = header.feature_dim;
        if header.widths != MlpParams::widths(m)
            || header.feature_stats.mean.len() != m
            || header.feature_stats.std.len() != m
        {
            return Err(ClassifierError::Dimension {
                expected: m,
                actual: header.feature_stats.mean.len(),
            });
        }
        if header.feature_stats.std.iter().any(|s| s.is_nan() || *s < STD_FLOOR) {
            return Err(ClassifierError::Malformed("feature std below floor".into()));
        }
        let blob = &bytes[split + 1..];
        let expected = MlpParams::zeros(m).param_count() * 8;
        if header.blob_bytes != expected || header.weight_count * 8 != expected {
            return Err(ClassifierError::Malformed(format!(
                "header declares {} bytes, widths need {expected}",
                header.blob_bytes
            )));
        }
        if blob.len() != expected {
            return Err(ClassifierError::BlobLength {
                expected,
                actual: blob.len(),
            });
        }
        if hex::encode(Sha256::digest(blob)) != header.blob_sha256 {
            return Err(ClassifierError::Checksum);
        }
        let flat: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self {
            params: MlpParams::from_flat(m, &flat)?,
            stats: header.feature_stats,
            config: header.train_config,
            model_fingerprint: header.model_fingerprint,
        })
    }
}

pub fn save_classifier(classifier: &Classifier, path: &Path) -> Result<(), ClassifierError> {
    fs::write(path, classifier.to_bytes()).map_err(|source| ClassifierError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_classifier(path: &Path) -> Result<Classifier, ClassifierError> {
    let bytes = fs::read(path).map_err(|source| ClassifierError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Classifier::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cv(counts: &[u32], label: Option<Label>) -> CoverageVector {
        CoverageVector {
            counts: counts.to_vec(),
            label,
        }
    }

    fn random_params(m: usize, seed: u64, scale: f64) -> MlpParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = MlpParams::init(m, seed);
        for s in p.stages_mut() {
            s.bias.iter_mut().for_each(|b| *b = rng.random_range(-scale..scale));
        }
        p
    }

    // Independent layer-by-layer forward written against plain vectors.
    fn oracle_logit(p: &MlpParams, x: &[f64]) -> f64 {
        let mut a = x.to_vec();
        for (k, s) in p.stages().iter().enumerate() {
            let mut z = vec![0.0; s.out_dim];
            for o in 0..s.out_dim {
                z[o] = s.bias[o];
                for i in 0..s.in_dim {
                    z[o] += s.matrix[o * s.in_dim + i] * a[i];
                }
            }
            a = if k < 4 { z.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect() } else { z };
        }
        a[0]
    }

    // Backprop re-derived on nested vectors, averaged over samples.
    fn oracle_gradient(p: &MlpParams, xs: &[Vec<f64>], ys: &[f64]) -> Vec<f64> {
        let st = p.stages();
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = st.iter().map(|s| (vec![0.0; s.matrix.len()], vec![0.0; s.out_dim])).collect();
        for (x, &y) in xs.iter().zip(ys) {
            let mut acts = vec![x.clone()];
            let mut zs = Vec::new();
            for (k, s) in st.iter().enumerate() {
                let a = acts.last().unwrap();
                let z: Vec<f64> = (0..s.out_dim)
                    .map(|o| s.bias[o] + (0..s.in_dim).map(|i| s.matrix[o * s.in_dim + i] * a[i]).sum::<f64>())
                    .collect();
                acts.push(if k < 4 { z.iter().map(|v| v.max(0.0)).collect() } else { z.clone() });
                zs.push(z);
            }
            let out = zs[4][0];
            let mut d = vec![1.0 / (1.0 + (-out).exp()) - y];
            for k in (0..5).rev() {
                let s = &st[k];
                for o in 0..s.out_dim {
                    grads[k].1[o] += d[o] / xs.len() as f64;
                    for i in 0..s.in_dim {
                        grads[k].0[o * s.in_dim + i] += d[o] * acts[k][i] / xs.len() as f64;
                    }
                }
                if k > 0 {
                    d = (0..s.in_dim)
                        .map(|i| {
                            let back: f64 = (0..s.out_dim).map(|o| s.matrix[o * s.in_dim + i] * d[o]).sum();
                            if zs[k - 1][i] > 0.0 { back } else { 0.0 }
                        })
                        .collect();
                }
            }
        }
        grads.into_iter().flat_map(|(w, b)| w.into_iter().chain(b)).collect()
    }

    #[test]
    fn stats_cases() {
        let s = fit_feature_stats(&[cv(&[3, 5], None)]).unwrap();
        assert_eq!(s.mean, vec![3.0, 5.0]);
        assert_eq!(s.std, vec![STD_FLOOR, STD_FLOOR]);
        let s = fit_feature_stats(&[cv(&[0, 0, 0], None), cv(&[2, 2, 2], None)]).unwrap();
        assert_eq!(s.mean, vec![1.0; 3]);
        assert_eq!(s.std, vec![1.0; 3]);
        assert!(matches!(fit_feature_stats(&[]), Err(ClassifierError::Empty)));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vs: Vec<_> = (0..100)
            .map(|_| cv(&(0..5).map(|_| rng.random_range(0..64)).collect::<Vec<_>>(), None))
            .collect();
        let s = fit_feature_stats(&vs).unwrap();
        for d in 0..5 {
            let col: Vec<f64> = vs.iter().map(|v| v.counts[d] as f64).collect();
            let mu = col.iter().sum::<f64>() / 100.0;
            let var = col.iter().map(|c| (c - mu) * (c - mu)).sum::<f64>() / 100.0;
            assert!((s.mean[d] - mu).abs() <= 1e-12);
            assert!((s.std[d] - var.sqrt().max(STD_FLOOR)).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_cases() {
        let stats = FeatureStats {
            mean: vec![0.0; 5],
            std: vec![1.0; 5],
        };
        let zero = MlpParams::zeros(5);
        assert_eq!(mlp_forward(&zero, &stats, &cv(&[1, 2, 3, 4, 5], None)).unwrap(), 0.5);

        let mut sat = MlpParams::zeros(5);
        sat.stages_mut()[4].bias[0] = 30.0;
        let p = mlp_forward(&sat, &stats, &cv(&[0; 5], None)).unwrap();
        assert!((p - 1.0).abs() < 1e-9 && p < 1.0);
        sat.stages_mut()[4].bias[0] = 1e6;
        let p = mlp_forward(&sat, &stats, &cv(&[0; 5], None)).unwrap();
        assert!(p < 1.0 && p > 0.0);

        let params = random_params(5, 8, 0.5);
        let stats = FeatureStats {
            mean: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            std: vec![2.0, 1.0, 0.5, 3.0, 1.5],
        };
        let x = cv(&[3, 1, 4, 1, 5], None);
        let xs: Vec<f64> = x
            .counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (c as f64 - stats.mean[i]) / stats.std[i])
            .collect();
        let expect = 1.0 / (1.0 + (-oracle_logit(&params, &xs)).exp());
        assert!((mlp_forward(&params, &stats, &x).unwrap() - expect).abs() <= 1e-12);
        assert!(matches!(
            mlp_forward(&params, &stats, &cv(&[1, 2], None)),
            Err(ClassifierError::Dimension { expected: 5, actual: 2 })
        ));
    }

    #[test]
    fn bce_cases() {
        assert!((bce_loss(0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(1.0 - 1e-15, 1.0) < 1e-14);
        assert!(bce_loss(1e-15, 0.0) < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let p: f64 = rng.random_range(1e-6..1.0 - 1e-6);
            let y = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            let direct = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            assert!((bce_loss(p, y) - direct).abs() <= 1e-10);
        }
    }

    #[test]
    fn predict_tie_goes_to_real() {
        let stats = FeatureStats {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        };
        let pr = predict(&MlpParams::zeros(3), &stats, &cv(&[1, 1, 1], None)).unwrap();
        assert_eq!(pr.tag, Label::Real);
        assert_eq!(pr.p, 0.5);
        let mut p = MlpParams::zeros(3);
        p.stages_mut()[4].bias[0] = (0.7f64 / 0.3).ln();
        let pr = predict(&p, &stats, &cv(&[1, 1, 1], None)).unwrap();
        assert!((pr.p - 0.7).abs() < 1e-12);
        assert_eq!(pr.tag, Label::Fake);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let params = random_params(5, 31, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        for y in [0.0, 1.0] {
            let (_, grad) = params.loss_and_gradient(std::slice::from_ref(&x), &[y]);
            let analytic = grad.to_flat();
            let flat = params.to_flat();
            let eps = 1e-5;
            let mut worst = 0.0f64;
            for i in 0..flat.len() {
                let mut plus = flat.clone();
                plus[i] += eps;
                let mut minus = flat.clone();
                minus[i] -= eps;
                let lp = bce_with_logit(MlpParams::from_flat(5, &plus).unwrap().logit(&x), y);
                let lm = bce_with_logit(MlpParams::from_flat(5, &minus).unwrap().logit(&x), y);
                worst = worst.max(rel_err(analytic[i], (lp - lm) / (2.0 * eps)));
            }
            assert!(worst < 1e-4, "max relative error {worst}");
        }
    }

    #[test]
    fn full_batch_step_matches_analytic_gradient_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Vec<f64>> = (0..12).map(|_| (0..4).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let ys: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
        let config = TrainConfig {
            base_lr: 0.05,
            momentum: 0.0,
            decay: 0.0,
            batch_size: 12,
            max_epochs: 1,
            seed: 99,
        };
        let (after, _) = train_standardized(&xs, &ys, &config).unwrap();
        let start = MlpParams::init(4, derive_seed(99, "init"));

        // Gradient via central differences of the mean loss.
        let flat = start.to_flat();
        let mean_loss = |f: &[f64]| {
            let p = MlpParams::from_flat(4, f).unwrap();
            xs.iter().zip(&ys).map(|(x, &y)| bce_with_logit(p.logit(x), y)).sum::<f64>() / 12.0
        };
        let g = oracle_gradient(&start, &xs, &ys);
        for (i, (a, b)) in after.to_flat().iter().zip(&flat).enumerate() {
            assert!((a - (b - 0.05 * g[i])).abs() <= 1e-10);
        }
        // and the analytic gradient itself agrees with differences on a sample of coordinates
        for i in (0..flat.len()).step_by(37) {
            let mut p = flat.clone();
            p[i] += 1e-5;
            let mut m = flat.clone();
            m[i] -= 1e-5;
            let fd = (mean_loss(&p) - mean_loss(&m)) / 2e-5;
            assert!(rel_err(g[i], fd) < 1e-4);
        }
    }

    #[test]
    fn decay_schedule() {
        let c = TrainConfig {
            decay: 0.0,
            ..TrainConfig::default()
        };
        assert!((0..1000).all(|t| c.lr_at(t) == c.base_lr));
        let c = TrainConfig::default();
        assert!((c.lr_at(1_000_000) - 1e-4 / 2.0).abs() < 1e-18);
    }

    #[test]
    fn training_errors() {
        let one_class = vec![cv(&[1, 2], Some(Label::Fake)), cv(&[2, 3], Some(Label::Fake))];
        assert!(matches!(
            train(&one_class, &TrainConfig::default()),
            Err(ClassifierError::SingleClass { real: 0, fake: 2 })
        ));
        let unlabeled = vec![cv(&[1, 2], Some(Label::Fake)), cv(&[2, 3], None)];
        assert!(matches!(
            train(&unlabeled, &TrainConfig::default()),
            Err(ClassifierError::Unlabeled { index: 1 })
        ));
        let bad = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(ClassifierError::Config(_))));
    }

    fn separable(n: usize, seed: u64) -> Vec<CoverageVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let fake = i % 2 == 1;
                let base = if fake { 10 } else { 4 };
                let counts = (0..5).map(|_| base + rng.random_range(0..3)).collect::<Vec<u32>>();
                cv(&counts, Some(if fake { Label::Fake } else { Label::Real }))
            })
            .collect()
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let data = separable(128, 3);
        let config = TrainConfig {
            max_epochs: 50,
            seed: 4,
            ..TrainConfig::default()
        };
        let t = train(&data, &config).unwrap();
        assert_eq!(t.history.len(), 50);
        assert!(t.history[49].mean_loss < t.history[0].mean_loss);
        let again = train(&data, &config).unwrap();
        assert_eq!(t.params.to_flat(), again.params.to_flat());
    }

    #[test]
    fn rescaled_features_train_identically() {
        let data = separable(64, 9);
        let scaled: Vec<_> = data
            .iter()
            .map(|v| cv(&v.counts.iter().map(|c| c * 3).collect::<Vec<_>>(), v.label))
            .collect();
        let config = TrainConfig {
            max_epochs: 10,
            seed: 1,
            ..TrainConfig::default()
        };
        let a = train(&data, &config).unwrap();
        let b = train(&scaled, &config).unwrap();
        for (x, y) in a.params.to_flat().iter().zip(b.params.to_flat()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn classifier_file_round_trip_and_corruption() {
        let data = separable(40, 2);
        let t = train(
            &data,
            &TrainConfig {
                max_epochs: 3,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let c = Classifier {
            params: t.params,
            stats: t.stats,
            config: TrainConfig::default(),
            model_fingerprint: Some("abc".into()),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.bin");
        save_classifier(&c, &path).unwrap();
        let back = load_classifier(&path).unwrap();
        assert_eq!(back, c);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let x = cv(&(0..5).map(|_| rng.random_range(0..20)).collect::<Vec<_>>(), None);
            assert_eq!(c.predict(&x).unwrap().p.to_bits(), back.predict(&x).unwrap().p.to_bits());
        }
        assert!(matches!(back.check_dim(4), Err(ClassifierError::Dimension { .. })));

        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0xFF;
        assert!(matches!(Classifier::from_bytes(&bytes), Err(ClassifierError::Checksum)));
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(Classifier::from_bytes(&bytes), Err(ClassifierError::BlobLength { .. })));
        assert!(matches!(Classifier::from_bytes(b"{}\n"), Err(ClassifierError::Malformed(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn probabilities_stay_open_unit(seed in any::<u64>(), scale in 0.0f64..1e4) {
            let mut params = random_params(5, seed, 1.0);
            params.stages_mut().iter_mut().for_each(|s| s.matrix.iter_mut().for_each(|w| *w *= scale.sqrt()));
            let stats = FeatureStats { mean: vec![0.0; 5], std: vec![1.0; 5] };
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let x = cv(&(0..5).map(|_| rng.random_range(0..100)).collect::<Vec<_>>(), None);
            let p = mlp_forward(&params, &stats, &x).unwrap();
            prop_assert!(p > 0.0 && p < 1.0);
        }

        #[test]
        fn prediction_is_permutation_equivariant(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let params = random_params(4, seed, 0.5);
            let stats = FeatureStats { mean: vec![2.0; 4], std: vec![1.5; 4] };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<_> = (0..16).map(|_| cv(&(0..4).map(|_| rng.random_range(0..8)).collect::<Vec<_>>(), None)).collect();
            let mut perm: Vec<usize> = (0..16).collect();
            perm.shuffle(&mut rng);
            let direct: Vec<_> = xs.iter().map(|x| predict(&params, &stats, x).unwrap()).collect();
            let permuted: Vec<_> = perm.iter().map(|&i| predict(&params, &stats, &xs[i]).unwrap()).collect();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(permuted[k], direct[i]);
            }
        }
    }
}
