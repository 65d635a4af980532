//! End-to-end orchestration over a run directory: corpus generation,
//! threshold fitting, feature extraction, training, prediction, evaluation
//! and robustness sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{load_model, make_toy_backbone, ModelError, ModelGraph};
use crate::classifier::{load_classifier, save_classifier, train, Classifier, ClassifierError, TrainConfig};
use crate::coverage::{
    batch_extract, compute_thresholds, coverage_vector, read_features, write_features, CoverageError, CoverageVector,
    FeatureRow, Label, LayerThresholds,
};
use crate::dataset::{DatasetError, DatasetManifest, ManifestEntry, Split};
use crate::image::{read_ppm, Image, ImageError};
use crate::metrics::{full_report, roc_auc, MetricsError, MetricsReport, ScoredSample};
use crate::perturb::{apply, AttackKind, PerturbError, PerturbSpec};
use crate::rng::derive_seed;
use crate::synth::{gen_synthetic, SynthError, SyntheticSpec, MANIFEST_NAME};
use crate::tensor::TensorError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("{path}: {source}")]
    Tensor {
        path: PathBuf,
        #[source]
        source: TensorError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Coverage(#[from] CoverageError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        EXIT_CONFIG
    }
}

/// Run configuration, read from JSON. Unset artifact paths default to
/// fixed names under `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Saved backbone manifest; the seeded toy backbone when absent.
    pub model: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub thresholds: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    /// Generation settings; the seed field is replaced by the global seed.
    pub synthetic: SyntheticSpec,
    /// Training settings; the seed field is replaced by the global seed.
    pub train: TrainConfig,
    /// Robustness grid; the default grid when absent.
    pub grid: Option<Vec<PerturbSpec>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("run"),
            seed: 7,
            model: None,
            manifest: None,
            thresholds: None,
            classifier: None,
            synthetic: SyntheticSpec::default(),
            train: TrainConfig::default(),
            grid: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.artifact("data")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.data_dir().join(MANIFEST_NAME))
    }

    pub fn thresholds_path(&self) -> PathBuf {
        self.thresholds.clone().unwrap_or_else(|| self.artifact("thresholds.json"))
    }

    pub fn classifier_path(&self) -> PathBuf {
        self.classifier.clone().unwrap_or_else(|| self.artifact("classifier.bin"))
    }

    pub fn features_path(&self, split: Split) -> PathBuf {
        self.artifact(&format!("features_{split}.csv"))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn robustness_grid(&self) -> Vec<PerturbSpec> {
        self.grid.clone().unwrap_or_else(|| default_grid(derive_seed(self.seed, "noise")))
    }
}

pub fn default_grid(noise_seed: u64) -> Vec<PerturbSpec> {
    let grids: [(AttackKind, [f64; 5]); 4] = [
        (AttackKind::Compress, [90.0, 70.0, 50.0, 30.0, 10.0]),
        (AttackKind::Blur, [0.3, 0.6, 1.0, 1.5, 2.0]),
        (AttackKind::Resize, [0.9, 0.75, 0.5, 0.35, 0.25]),
        (AttackKind::Noise, [0.001, 0.0025, 0.005, 0.0075, 0.01]),
    ];
    grids
        .iter()
        .flat_map(|(kind, values)| values.iter().map(move |&v| PerturbSpec::new(*kind, v).with_seed(noise_seed)))
        .collect()
}

fn ensure_out_dir(config: &RunConfig) -> Result<(), PipelineError> {
    fs::create_dir_all(&config.out_dir).map_err(|source| PipelineError::Io {
        path: config.out_dir.clone(),
        source,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_backbone(config: &RunConfig) -> Result<ModelGraph, PipelineError> {
    match &config.model {
        Some(path) => Ok(load_model(path)?),
        None => Ok(make_toy_backbone(derive_seed(config.seed, "backbone"))),
    }
}

fn load_image(path: &Path) -> Result<Image, PipelineError> {
    read_ppm(path).map_err(|source| PipelineError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn load_images(manifest: &DatasetManifest, entries: &[&ManifestEntry]) -> Result<Vec<Image>, PipelineError> {
    entries.par_iter().map(|e| load_image(&manifest.resolve(e))).collect()
}

fn to_tensor(img: &Image, path: &Path) -> Result<crate::tensor::Tensor3, PipelineError> {
    img.to_tensor().map_err(|source| PipelineError::Tensor {
        path: path.to_path_buf(),
        source,
    })
}

/// Backbone, thresholds and classifier, checked against each other.
pub struct Artifacts {
    pub model: ModelGraph,
    pub thresholds: LayerThresholds,
    pub classifier: Classifier,
}

impl Artifacts {
    pub fn load(config: &RunConfig) -> Result<Self, PipelineError> {
        let model = load_backbone(config)?;
        let thresholds = LayerThresholds::load(&config.thresholds_path())?;
        thresholds.check_model(&model)?;
        let classifier = load_classifier(&config.classifier_path())?;
        classifier.check_dim(thresholds.len())?;
        if let Some(fp) = &classifier.model_fingerprint {
            if fp != model.fingerprint() {
                return Err(PipelineError::Config(format!(
                    "classifier was trained on backbone {fp}, current backbone is {}",
                    model.fingerprint()
                )));
            }
        }
        Ok(Self {
            model,
            thresholds,
            classifier,
        })
    }

    pub fn score(&self, img: &Image, path: &Path) -> Result<f64, PipelineError> {
        let trace = self.model.forward_with_trace(&to_tensor(img, path)?)?;
        let v = coverage_vector(&trace, &self.thresholds)?;
        Ok(self.classifier.predict(&v)?.p)
    }

    /// Scores each image in parallel; results keep input order.
    pub fn score_all(&self, images: &[Image], paths: &[PathBuf]) -> Result<Vec<f64>, PipelineError> {
        images
            .par_iter()
            .zip(paths.par_iter())
            .map(|(img, path)| self.score(img, path))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// subcommands

pub fn cmd_gen(config: &RunConfig) -> Result<DatasetManifest, PipelineError> {
    let spec = SyntheticSpec {
        seed: config.seed,
        ..config.synthetic.clone()
    };
    let [_, h, w] = load_backbone(config)?.input_shape();
    if (spec.width, spec.height) != (w, h) {
        return Err(PipelineError::Config(format!(
            "synthetic images are {}x{}, backbone expects {w}x{h}",
            spec.width, spec.height
        )));
    }
    let dir = config.data_dir();
    let manifest = gen_synthetic(&spec, &dir)?;
    info!("generated {} images under {}", manifest.entries.len(), dir.display());
    Ok(manifest)
}

pub fn cmd_fit_thresholds(config: &RunConfig) -> Result<LayerThresholds, PipelineError> {
    ensure_out_dir(config)?;
    let manifest = DatasetManifest::load(&config.manifest_path())?;
    let model = load_backbone(config)?;
    let entries = manifest.split(Split::Train);
    if entries.is_empty() {
        return Err(PipelineError::Config("train split is empty".into()));
    }
    let images = load_images(&manifest, &entries)?;
    let tensors = images
        .iter()
        .zip(&entries)
        .map(|(img, e)| to_tensor(img, &manifest.resolve(e)))
        .collect::<Result<Vec<_>, _>>()?;
    let thresholds = compute_thresholds(&model, &tensors)?;
    info!("fit thresholds over |T| = {}", thresholds.training_set_size);
    for l in &thresholds.layers {
        info!("  layer {:>2}: {} neurons, xi = {:.6}", l.layer_index, l.neuron_count, l.xi);
    }
    let path = config.thresholds_path();
    thresholds.save(&path)?;
    Ok(thresholds)
}

/// Writes the features file of each requested split (both when `None`).
pub fn cmd_extract(config: &RunConfig, split: Option<Split>) -> Result<Vec<PathBuf>, PipelineError> {
    ensure_out_dir(config)?;
    let manifest = DatasetManifest::load(&config.manifest_path())?;
    let model = load_backbone(config)?;
    let thresholds = LayerThresholds::load(&config.thresholds_path())?;
    thresholds.check_model(&model)?;
    let splits = match split {
        Some(s) => vec![s],
        None => vec![Split::Train, Split::Test],
    };
    let mut written = Vec::new();
    for split in splits {
        let entries = manifest.split(split);
        let images = load_images(&manifest, &entries)?;
        let labeled = images
            .iter()
            .zip(&entries)
            .map(|(img, e)| Ok((to_tensor(img, &manifest.resolve(e))?, Some(e.label))))
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let vectors = batch_extract(&model, &thresholds, &labeled)?;
        let rows: Vec<FeatureRow> = entries
            .iter()
            .zip(vectors)
            .map(|(e, vector)| FeatureRow {
                sample_id: e.path.clone(),
                vector,
            })
            .collect();
        let path = config.features_path(split);
        write_features(&path, &thresholds, &rows)?;
        info!("wrote {} {split} feature rows to {}", rows.len(), path.display());
        written.push(path);
    }
    Ok(written)
}

pub fn cmd_train(config: &RunConfig) -> Result<Classifier, PipelineError> {
    ensure_out_dir(config)?;
    let model = load_backbone(config)?;
    let thresholds = LayerThresholds::load(&config.thresholds_path())?;
    thresholds.check_model(&model)?;
    let rows = read_features(&config.features_path(Split::Train))?;
    let features: Vec<CoverageVector> = rows.into_iter().map(|r| r.vector).collect();
    if let Some(f) = features.iter().find(|f| f.len() != thresholds.len()) {
        return Err(PipelineError::Config(format!(
            "features have {} columns, thresholds cover {} layers",
            f.len(),
            thresholds.len()
        )));
    }
    let train_config = config.train_config();
    let trained = train(&features, &train_config)?;
    if let Some(last) = trained.history.last() {
        info!(
            "trained {} epochs: loss {:.5}, train accuracy {:.4}",
            trained.history.len(),
            last.mean_loss,
            last.accuracy
        );
    }
    let mut history = String::from("epoch,mean_loss,accuracy,lr\n");
    for r in &trained.history {
        writeln!(history, "{},{:?},{:?},{:?}", r.epoch, r.mean_loss, r.accuracy, r.lr).unwrap();
    }
    write_file(&config.artifact("train_history.csv"), history)?;
    let classifier = Classifier {
        params: trained.params,
        stats: trained.stats,
        config: train_config,
        model_fingerprint: Some(model.fingerprint().to_string()),
    };
    save_classifier(&classifier, &config.classifier_path())?;
    Ok(classifier)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tag: Option<Label>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PredictOutcome {
    pub records: Vec<PredictionRecord>,
    pub failures: usize,
}

impl PredictOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.failures > 0 {
            EXIT_PARTIAL
        } else {
            EXIT_OK
        }
    }
}

/// Scores each image independently; a failing image is recorded and the
/// rest still run. Records go to `predictions.jsonl` in input order.
pub fn cmd_predict(config: &RunConfig, images: &[PathBuf]) -> Result<PredictOutcome, PipelineError> {
    ensure_out_dir(config)?;
    let artifacts = Artifacts::load(config)?;
    let records: Vec<PredictionRecord> = images
        .par_iter()
        .map(|path| {
            let shown = path.display().to_string();
            let result = load_image(path).and_then(|img| {
                let trace = artifacts.model.forward_with_trace(&to_tensor(&img, path)?)?;
                let v = coverage_vector(&trace, &artifacts.thresholds)?;
                Ok(artifacts.classifier.predict(&v)?)
            });
            match result {
                Ok(pred) => PredictionRecord {
                    path: shown,
                    tag: Some(pred.tag),
                    p: Some(pred.p),
                    error: None,
                },
                Err(e) => {
                    warn!("{shown}: {e}");
                    PredictionRecord {
                        path: shown,
                        tag: None,
                        p: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let failures = records.iter().filter(|r| r.error.is_some()).count();
    let mut out = String::new();
    for r in &records {
        out.push_str(&serde_json::to_string(r).expect("prediction serializes"));
        out.push('\n');
    }
    write_file(&config.artifact("predictions.jsonl"), out)?;
    Ok(PredictOutcome { records, failures })
}

struct TestSet {
    entries: Vec<ManifestEntry>,
    paths: Vec<PathBuf>,
    images: Vec<Image>,
}

fn load_test_set(config: &RunConfig) -> Result<TestSet, PipelineError> {
    let manifest = DatasetManifest::load(&config.manifest_path())?;
    let entries: Vec<ManifestEntry> = manifest.split(Split::Test).into_iter().cloned().collect();
    if entries.is_empty() {
        return Err(PipelineError::Config("test split is empty".into()));
    }
    let refs: Vec<&ManifestEntry> = entries.iter().collect();
    let images = load_images(&manifest, &refs)?;
    let paths = entries.iter().map(|e| manifest.resolve(e)).collect();
    Ok(TestSet { entries, paths, images })
}

fn scored(entries: &[ManifestEntry], scores: &[f64]) -> Vec<ScoredSample> {
    entries
        .iter()
        .zip(scores)
        .map(|(e, &score)| ScoredSample { score, truth: e.label })
        .collect()
}

/// Scores the test split; writes `report.json`, `roc.csv`, `pr.csv` and
/// `scores.csv`.
pub fn cmd_evaluate(config: &RunConfig) -> Result<MetricsReport, PipelineError> {
    ensure_out_dir(config)?;
    let artifacts = Artifacts::load(config)?;
    let test = load_test_set(config)?;
    let scores = artifacts.score_all(&test.images, &test.paths)?;
    let samples = scored(&test.entries, &scores);
    let full = full_report(&samples)?;
    let json = serde_json::to_string_pretty(&full.report).expect("report serializes");
    write_file(&config.artifact("report.json"), json + "\n")?;
    full.roc.write_csv(&config.artifact("roc.csv"))?;
    full.pr.write_csv(&config.artifact("pr.csv"))?;
    let mut csv = String::from("path,label,score\n");
    for (e, s) in test.entries.iter().zip(&scores) {
        writeln!(csv, "{},{},{:?}", e.path, e.label, s).unwrap();
    }
    write_file(&config.artifact("scores.csv"), csv)?;
    let r = &full.report;
    info!(
        "test: auc {:.4} ap {:.4} accuracy {:.4} precision {:.4} recall {:.4}",
        r.auc, r.ap, r.accuracy, r.precision, r.recall
    );
    Ok(full.report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessRow {
    /// `None` for the unperturbed baseline.
    pub spec: Option<PerturbSpec>,
    pub auc: f64,
    pub accuracy: f64,
    pub degenerate: Vec<String>,
}

impl RobustnessRow {
    pub fn attack(&self) -> &'static str {
        self.spec.map(|s| s.kind.as_str()).unwrap_or("none")
    }
}

/// Baseline row first, then one row per grid entry; written to
/// `robustness.csv`.
pub fn cmd_robustness(config: &RunConfig) -> Result<Vec<RobustnessRow>, PipelineError> {
    ensure_out_dir(config)?;
    let artifacts = Artifacts::load(config)?;
    let test = load_test_set(config)?;
    let grid = config.robustness_grid();
    for spec in &grid {
        spec.validate()?;
    }
    let row = |spec: Option<PerturbSpec>, scores: Vec<f64>| -> Result<RobustnessRow, PipelineError> {
        let samples = scored(&test.entries, &scores);
        let (auc, _) = roc_auc(&samples)?;
        let full = full_report(&samples)?;
        Ok(RobustnessRow {
            spec,
            auc,
            accuracy: full.report.accuracy,
            degenerate: full.report.degenerate,
        })
    };
    let mut rows = vec![row(None, artifacts.score_all(&test.images, &test.paths)?)?];
    info!("baseline auc {:.4}", rows[0].auc);
    for spec in grid {
        let perturbed = test
            .images
            .par_iter()
            .map(|img| apply(&spec, img))
            .collect::<Result<Vec<_>, _>>()?;
        let r = row(Some(spec), artifacts.score_all(&perturbed, &test.paths)?)?;
        info!("{spec}: auc {:.4}", r.auc);
        rows.push(r);
    }
    let mut csv = String::from("attack,intensity,spec,auc,accuracy,degenerate\n");
    for r in &rows {
        let (intensity, spec) = match r.spec {
            Some(s) => (format!("{:?}", s.intensity), s.to_string()),
            None => (String::new(), String::new()),
        };
        writeln!(
            csv,
            "{},{},{},{:?},{:?},{}",
            r.attack(),
            intensity,
            spec,
            r.auc,
            r.accuracy,
            r.degenerate.join(";")
        )
        .unwrap();
    }
    write_file(&config.artifact("robustness.csv"), csv)?;
    Ok(rows)
}

/// Every stage in order, starting from a freshly generated corpus.
pub fn run_all(config: &RunConfig) -> Result<(MetricsReport, Vec<RobustnessRow>), PipelineError> {
    cmd_gen(config)?;
    cmd_fit_thresholds(config)?;
    cmd_extract(config, None)?;
    cmd_train(config)?;
    let report = cmd_evaluate(config)?;
    let rows = cmd_robustness(config)?;
    Ok((report, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_paths() {
        let c: RunConfig = serde_json::from_str(r#"{"out_dir": "x", "seed": 3}"#).unwrap();
        assert_eq!(c.thresholds_path(), PathBuf::from("x/thresholds.json"));
        assert_eq!(c.manifest_path(), PathBuf::from("x/data/manifest.jsonl"));
        assert_eq!(c.features_path(Split::Test), PathBuf::from("x/features_test.csv"));
        assert_eq!(c.train_config().seed, 3);
        assert_eq!(c.robustness_grid().len(), 20);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn grid_round_trips_as_strings() {
        let c: RunConfig = serde_json::from_str(r#"{"grid": ["blur:1.0", "noise:0.01:42"]}"#).unwrap();
        let grid = c.robustness_grid();
        assert_eq!(grid[1], PerturbSpec::new(AttackKind::Noise, 0.01).with_seed(42));
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains(r#""grid":["blur:1.0","noise:0.01:42"]"#));
        assert!(serde_json::from_str::<RunConfig>(r#"{"grid": ["blur:-1"]}"#).is_err());
    }

    #[test]
    fn default_grid_matches_declared_points() {
        let g = default_grid(5);
        let mild: Vec<String> = g.iter().step_by(5).map(|s| s.to_string()).collect();
        assert_eq!(mild, ["compress:90.0", "blur:0.3", "resize:0.9", "noise:0.001:5"]);
    }
}
