//! Mean neuron coverage.
//!
//! Each eligible layer gets a threshold equal to the mean neuron output over
//! a training set. A neuron is *activated* for an input when its output is
//! strictly greater than its layer's threshold, and the per-layer activated
//! counts form the feature vector handed to the classifier.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{ActivationTrace, ModelError, ModelGraph};
use crate::tensor::Tensor3;

#[derive(Debug, Error)]
pub enum CoverageError {
    #[error("threshold fitting needs at least one training image")]
    EmptyTrainingSet,
    #[error("image {index}: {source}")]
    Image {
        index: usize,
        #[source]
        source: ModelError,
    },
    #[error("model fingerprint mismatch: thresholds fit on {expected}, trace from {actual}")]
    Fingerprint { expected: String, actual: String },
    #[error("layer structure mismatch: {0}")]
    Structure(String),
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// 1 for fake (the positive class), 0 for real.
    pub fn as_target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerThreshold {
    pub layer_index: usize,
    pub neuron_count: usize,
    pub xi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerThresholds {
    pub model_fingerprint: String,
    pub training_set_size: usize,
    pub layers: Vec<LayerThreshold>,
}

impl LayerThresholds {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn xi(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.xi).collect()
    }

    pub fn neuron_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.neuron_count).collect()
    }

    /// Fails unless these thresholds were fit on `model`.
    pub fn check_model(&self, model: &ModelGraph) -> Result<(), CoverageError> {
        if self.model_fingerprint != model.fingerprint() {
            return Err(CoverageError::Fingerprint {
                expected: self.model_fingerprint.clone(),
                actual: model.fingerprint().to_string(),
            });
        }
        let ours: Vec<(usize, usize)> = self.layers.iter().map(|l| (l.layer_index, l.neuron_count)).collect();
        let theirs: Vec<(usize, usize)> = model
            .eligible_layers()
            .iter()
            .map(|l| (l.layer_index, l.neuron_count))
            .collect();
        if ours != theirs {
            return Err(CoverageError::Structure(format!("thresholds cover {ours:?}, model has {theirs:?}")));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CoverageError> {
        let json = serde_json::to_string_pretty(self).expect("thresholds serialize");
        fs::write(path, json + "\n").map_err(|source| CoverageError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CoverageError> {
        let text = fs::read_to_string(path).map_err(|source| CoverageError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let t: LayerThresholds = serde_json::from_str(&text).map_err(|e| CoverageError::Malformed {
            what: "thresholds file",
            detail: e.to_string(),
        })?;
        if t.layers.is_empty() || t.training_set_size == 0 || t.layers.iter().any(|l| !l.xi.is_finite()) {
            return Err(CoverageError::Malformed {
                what: "thresholds file",
                detail: "needs at least one finite layer threshold and a nonzero training set size".into(),
            });
        }
        Ok(t)
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.compensation += (self.sum - t) + v;
        } else {
            self.compensation += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Per-layer thresholds: the mean of every neuron output of the layer over
/// every training image.
///
/// Traces are computed in parallel; the reduction runs in image order with
/// compensated summation, so the result does not depend on thread scheduling
/// and is insensitive to the order of `training_images`.
pub fn compute_thresholds(model: &ModelGraph, training_images: &[Tensor3]) -> Result<LayerThresholds, CoverageError> {
    if training_images.is_empty() {
        return Err(CoverageError::EmptyTrainingSet);
    }
    let eligible = model.eligible_layers();
    let per_image: Vec<Vec<CompensatedSum>> = training_images
        .par_iter()
        .enumerate()
        .map(|(index, img)| {
            let trace = model
                .forward_with_trace(img)
                .map_err(|source| CoverageError::Image { index, source })?;
            Ok(trace
                .layers
                .iter()
                .map(|l| {
                    let mut s = CompensatedSum::default();
                    l.values.iter().for_each(|&v| s.add(v));
                    s
                })
                .collect())
        })
        .collect::<Result<_, CoverageError>>()?;

    let mut totals = vec![CompensatedSum::default(); eligible.len()];
    for sums in &per_image {
        for (total, s) in totals.iter_mut().zip(sums) {
            total.add(s.sum);
            total.add(s.compensation);
        }
    }
    let t = training_images.len() as f64;
    let layers = eligible
        .iter()
        .zip(&totals)
        .map(|(l, total)| LayerThreshold {
            layer_index: l.layer_index,
            neuron_count: l.neuron_count,
            xi: total.value() / (l.neuron_count as f64 * t),
        })
        .collect();
    Ok(LayerThresholds {
        model_fingerprint: model.fingerprint().to_string(),
        training_set_size: training_images.len(),
        layers,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageVector {
    pub counts: Vec<u32>,
    pub label: Option<Label>,
}

impl CoverageVector {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

/// Counts, per layer, the neurons whose output strictly exceeds the threshold.
pub fn coverage_vector(trace: &ActivationTrace, thresholds: &LayerThresholds) -> Result<CoverageVector, CoverageError> {
    if trace.model_fingerprint != thresholds.model_fingerprint {
        return Err(CoverageError::Fingerprint {
            expected: thresholds.model_fingerprint.clone(),
            actual: trace.model_fingerprint.clone(),
        });
    }
    if trace.layers.len() != thresholds.layers.len() {
        return Err(CoverageError::Structure(format!(
            "trace has {} layers, thresholds have {}",
            trace.layers.len(),
            thresholds.layers.len()
        )));
    }
    let counts = trace
        .layers
        .iter()
        .zip(&thresholds.layers)
        .map(|(layer, th)| {
            if layer.layer_index != th.layer_index || layer.values.len() != th.neuron_count {
                return Err(CoverageError::Structure(format!(
                    "trace layer {} with {} neurons vs threshold layer {} with {}",
                    layer.layer_index,
                    layer.values.len(),
                    th.layer_index,
                    th.neuron_count
                )));
            }
            Ok(layer.values.iter().filter(|&&v| v > th.xi).count() as u32)
        })
        .collect::<Result<_, _>>()?;
    Ok(CoverageVector { counts, label: None })
}

/// Traces and counts every image, preserving order and carrying labels.
pub fn batch_extract(
    model: &ModelGraph,
    thresholds: &LayerThresholds,
    labeled_images: &[(Tensor3, Option<Label>)],
) -> Result<Vec<CoverageVector>, CoverageError> {
    thresholds.check_model(model)?;
    labeled_images
        .par_iter()
        .enumerate()
        .map(|(index, (img, label))| {
            let trace = model
                .forward_with_trace(img)
                .map_err(|source| CoverageError::Image { index, source })?;
            let mut v = coverage_vector(&trace, thresholds)?;
            v.label = *label;
            Ok(v)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Features CSV: `sample_id,label,layer_<i>...` with label 1 = fake, 0 = real,
// empty = unlabeled.

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub sample_id: String,
    pub vector: CoverageVector,
}

pub fn features_header(thresholds: &LayerThresholds) -> String {
    let mut cols = vec!["sample_id".to_string(), "label".to_string()];
    cols.extend(thresholds.layers.iter().map(|l| format!("layer_{}", l.layer_index)));
    cols.join(",")
}

pub fn write_features(path: &Path, thresholds: &LayerThresholds, rows: &[FeatureRow]) -> Result<(), CoverageError> {
    let io = |source| CoverageError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    writeln!(out, "{}", features_header(thresholds)).map_err(io)?;
    for row in rows {
        if row.sample_id.contains([',', '\n', '"']) {
            return Err(CoverageError::Malformed {
                what: "sample id",
                detail: format!("{:?} contains a CSV delimiter", row.sample_id),
            });
        }
        let label = match row.vector.label {
            Some(Label::Fake) => "1",
            Some(Label::Real) => "0",
            None => "",
        };
        let counts: Vec<String> = row.vector.counts.iter().map(|c| c.to_string()).collect();
        writeln!(out, "{},{},{}", row.sample_id, label, counts.join(",")).map_err(io)?;
    }
    fs::write(path, out).map_err(io)
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRow>, CoverageError> {
    let text = fs::read_to_string(path).map_err(|source| CoverageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |detail: String| CoverageError::Malformed {
        what: "features file",
        detail,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "sample_id" || cols[1] != "label" {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let m = cols.len() - 2;
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != m + 2 {
                return Err(bad(format!("row {}: expected {} fields, got {}", i + 1, m + 2, fields.len())));
            }
            let label = match fields[1] {
                "1" => Some(Label::Fake),
                "0" => Some(Label::Real),
                "" => None,
                other => return Err(bad(format!("row {}: bad label {other:?}", i + 1))),
            };
            let counts = fields[2..]
                .iter()
                .map(|f| f.parse::<u32>().map_err(|e| bad(format!("row {}: {e}", i + 1))))
                .collect::<Result<_, _>>()?;
            Ok(FeatureRow {
                sample_id: fields[0].to_string(),
                vector: CoverageVector { counts, label },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{make_toy_backbone, LayerActivation, TOY_INPUT_SHAPE};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn thresholds(xi: &[f64], counts: &[usize]) -> LayerThresholds {
        LayerThresholds {
            model_fingerprint: "fp".into(),
            training_set_size: 1,
            layers: xi
                .iter()
                .zip(counts)
                .enumerate()
                .map(|(i, (&xi, &n))| LayerThreshold {
                    layer_index: i,
                    neuron_count: n,
                    xi,
                })
                .collect(),
        }
    }

    fn trace(values: Vec<Vec<f64>>) -> ActivationTrace {
        ActivationTrace {
            model_fingerprint: "fp".into(),
            layers: values
                .into_iter()
                .enumerate()
                .map(|(layer_index, values)| LayerActivation { layer_index, values })
                .collect(),
        }
    }

    fn random_images(seed: u64, n: usize) -> Vec<Tensor3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor3::new(3, 32, 32, (0..3072).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn strict_inequality_at_threshold() {
        let v = coverage_vector(&trace(vec![vec![1.0, 2.0, 3.0]]), &thresholds(&[2.0], &[3])).unwrap();
        assert_eq!(v.counts, vec![1]);
        let v = coverage_vector(&trace(vec![vec![0.1, 0.2], vec![-1.0]]), &thresholds(&[5.0, 0.0], &[2, 1])).unwrap();
        assert_eq!(v.counts, vec![0, 0]);
    }

    #[test]
    fn coverage_rejects_foreign_traces() {
        let mut t = trace(vec![vec![1.0]]);
        t.model_fingerprint = "other".into();
        assert!(matches!(
            coverage_vector(&t, &thresholds(&[0.0], &[1])),
            Err(CoverageError::Fingerprint { .. })
        ));
        assert!(matches!(
            coverage_vector(&trace(vec![vec![1.0, 2.0]]), &thresholds(&[0.0], &[1])),
            Err(CoverageError::Structure(_))
        ));
    }

    #[test]
    fn thresholds_on_toy_match_full_matrix_oracle() {
        let model = make_toy_backbone(4);
        let images = random_images(10, 50);
        let fit = compute_thresholds(&model, &images).unwrap();
        assert_eq!(fit.training_set_size, 50);
        assert_eq!(fit.model_fingerprint, model.fingerprint());

        // |N| x |T| matrix per layer, averaged in one pass at the end.
        let traces: Vec<_> = images.iter().map(|i| model.forward_with_trace(i).unwrap()).collect();
        for (l, th) in fit.layers.iter().enumerate() {
            let matrix: Vec<Vec<f64>> = traces.iter().map(|t| t.layers[l].values.clone()).collect();
            let all: Vec<f64> = matrix.into_iter().flatten().collect();
            let oracle = all.iter().sum::<f64>() / all.len() as f64;
            assert!((th.xi - oracle).abs() <= 1e-9 * oracle.abs().max(1e-300), "layer {l}");
            if l < 4 {
                assert!(th.xi >= 0.0);
            }
        }
    }

    #[test]
    fn empty_training_set_errors() {
        let model = make_toy_backbone(0);
        assert!(matches!(compute_thresholds(&model, &[]), Err(CoverageError::EmptyTrainingSet)));
        let wrong = vec![Tensor3::filled(1, 32, 32, 0.0).unwrap()];
        assert!(matches!(
            compute_thresholds(&model, &wrong),
            Err(CoverageError::Image { index: 0, .. })
        ));
    }

    #[test]
    fn batch_extract_matches_sequential() {
        let model = make_toy_backbone(4);
        let images = random_images(3, 20);
        let th = compute_thresholds(&model, &images[..10]).unwrap();
        assert!(batch_extract(&model, &th, &[]).unwrap().is_empty());

        let labeled: Vec<_> = images
            .iter()
            .enumerate()
            .map(|(i, img)| (img.clone(), Some(if i % 2 == 0 { Label::Real } else { Label::Fake })))
            .collect();
        let batch = batch_extract(&model, &th, &labeled).unwrap();
        for (i, (img, label)) in labeled.iter().enumerate() {
            let mut single = coverage_vector(&model.forward_with_trace(img).unwrap(), &th).unwrap();
            single.label = *label;
            assert_eq!(batch[i], single);
            for (c, n) in batch[i].counts.iter().zip(model.neuron_counts()) {
                assert!(*c as usize <= n);
            }
        }

        let mut bad = labeled.clone();
        bad[5].0 = Tensor3::filled(3, 8, 8, 0.0).unwrap();
        assert!(matches!(
            batch_extract(&model, &th, &bad),
            Err(CoverageError::Image { index: 5, .. })
        ));
    }

    #[test]
    fn thresholds_file_round_trip() {
        let model = make_toy_backbone(1);
        let th = compute_thresholds(&model, &random_images(2, 3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        th.save(&p).unwrap();
        let back = LayerThresholds::load(&p).unwrap();
        assert_eq!(back, th);
        for (a, b) in back.layers.iter().zip(&th.layers) {
            assert_eq!(a.xi.to_bits(), b.xi.to_bits());
        }
        back.check_model(&model).unwrap();
        assert!(back.check_model(&make_toy_backbone(2)).is_err());
        let _ = TOY_INPUT_SHAPE;
    }

    #[test]
    fn features_csv_round_trip() {
        let th = thresholds(&[0.0, 0.0], &[4, 4]);
        let rows = vec![
            FeatureRow {
                sample_id: "a.ppm".into(),
                vector: CoverageVector {
                    counts: vec![1, 2],
                    label: Some(Label::Fake),
                },
            },
            FeatureRow {
                sample_id: "b.ppm".into(),
                vector: CoverageVector {
                    counts: vec![0, 4],
                    label: None,
                },
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        write_features(&p, &th, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("sample_id,label,layer_0,layer_1\na.ppm,1,1,2\nb.ppm,,0,4\n"));
        assert_eq!(read_features(&p).unwrap(), rows);

        write_features(&p, &th, &[]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "sample_id,label,layer_0,layer_1\n");
        assert!(read_features(&p).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn counts_bounded_and_monotone_in_threshold(
            values in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 1..12), 1..6),
            seed in any::<u64>(),
            bump in 0.0f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let counts: Vec<usize> = values.iter().map(|v| v.len()).collect();
            let xi: Vec<f64> = values.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            let th = thresholds(&xi, &counts);
            let t = trace(values.clone());
            let base = coverage_vector(&t, &th).unwrap();
            for (c, n) in base.counts.iter().zip(&counts) {
                prop_assert!((*c as usize) <= *n);
            }
            let l = rng.random_range(0..values.len());
            let mut raised = xi.clone();
            raised[l] += bump;
            let after = coverage_vector(&t, &thresholds(&raised, &counts)).unwrap();
            prop_assert!(after.counts[l] <= base.counts[l]);
        }

        #[test]
        fn compensated_sum_is_order_insensitive(mut xs in prop::collection::vec(-1e3f64..1e3, 1..200), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut a = CompensatedSum::default();
            xs.iter().for_each(|&v| a.add(v));
            xs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut b = CompensatedSum::default();
            xs.iter().for_each(|&v| b.add(v));
            let scale = xs.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
            prop_assert!((a.value() - b.value()).abs() <= 1e-14 * scale);
        }
    }
}
