//! Binary detection metrics with fake as the positive class: thresholded
//! counts and ratios, ROC/AUC and precision-recall/AP.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::Label;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no samples to score")]
    Empty,
    #[error("need both classes, got {real} real and {fake} fake")]
    SingleClass { real: usize, fake: usize },
    #[error("sample {index}: score {score} outside [0, 1]")]
    Score { index: usize, score: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    /// Probability that the sample is fake.
    pub score: f64,
    pub truth: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_scores(samples: &[ScoredSample]) -> Result<(usize, usize), MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some((index, s)) = samples.iter().enumerate().find(|(_, s)| !(0.0..=1.0).contains(&s.score)) {
        return Err(MetricsError::Score { index, score: s.score });
    }
    let fake = samples.iter().filter(|s| s.truth == Label::Fake).count();
    Ok((samples.len() - fake, fake))
}

/// Predicts fake iff `score > threshold`.
pub fn confusion(samples: &[ScoredSample], threshold: f64) -> Result<ConfusionCounts, MetricsError> {
    check_scores(samples)?;
    let mut c = ConfusionCounts::default();
    for s in samples {
        match (s.score > threshold, s.truth) {
            (true, Label::Fake) => c.tp += 1,
            (true, Label::Real) => c.fp += 1,
            (false, Label::Real) => c.tn += 1,
            (false, Label::Fake) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub fpr: f64,
    pub fnr: f64,
    /// Names of metrics whose ratio was 0/0 and reported as 0.
    pub degenerate: Vec<String>,
}

pub fn basic_metrics(c: &ConfusionCounts) -> BasicMetrics {
    let mut degenerate = Vec::new();
    let mut ratio = |name: &str, num: f64, den: f64| {
        if den == 0.0 {
            degenerate.push(name.to_string());
            0.0
        } else {
            num / den
        }
    };
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let precision = ratio("precision", tp, tp + fp);
    let recall = ratio("recall", tp, tp + fn_);
    let f1 = ratio("f1", 2.0 * precision * recall, precision + recall);
    let accuracy = ratio("accuracy", tp + tn, c.total() as f64);
    let fpr = ratio("fpr", fp, fp + tn);
    let fnr = ratio("fnr", fn_, fn_ + tp);
    BasicMetrics {
        precision,
        recall,
        f1,
        accuracy,
        fpr,
        fnr,
        degenerate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    Roc,
    Pr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub kind: CurveKind,
    /// `(fpr, tpr)` for ROC, `(recall, precision)` for PR.
    pub points: Vec<(f64, f64)>,
}

impl Curve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(match self.kind {
            CurveKind::Roc => "fpr,tpr\n",
            CurveKind::Pr => "recall,precision\n",
        });
        for (x, y) in &self.points {
            out.push_str(&format!("{x:?},{y:?}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        fs::write(path, self.to_csv()).map_err(|source| MetricsError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Cumulative `(tp, fp)` after each group of tied scores, highest score first.
fn tie_groups(samples: &[ScoredSample]) -> Vec<(u64, u64)> {
    let mut order: Vec<&ScoredSample> = samples.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    for (i, s) in order.iter().enumerate() {
        match s.truth {
            Label::Fake => tp += 1,
            Label::Real => fp += 1,
        }
        if i + 1 == order.len() || order[i + 1].score != s.score {
            out.push((tp, fp));
        }
    }
    out
}

/// Area under the ROC curve by the trapezoid rule over the tie-grouped
/// staircase. The area is accumulated in integers, so the result is the
/// Mann-Whitney statistic (ties counted one half) up to one final division.
pub fn roc_auc(samples: &[ScoredSample]) -> Result<(f64, Curve), MetricsError> {
    let (real, fake) = check_scores(samples)?;
    if real == 0 || fake == 0 {
        return Err(MetricsError::SingleClass { real, fake });
    }
    let (p, n) = (fake as u64, real as u64);
    let mut points = vec![(0.0, 0.0)];
    let mut twice_area: u128 = 0;
    let (mut prev_tp, mut prev_fp) = (0u64, 0u64);
    for (tp, fp) in tie_groups(samples) {
        twice_area += (fp - prev_fp) as u128 * (tp + prev_tp) as u128;
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
        (prev_tp, prev_fp) = (tp, fp);
    }
    let auc = twice_area as f64 / (2 * p as u128 * n as u128) as f64;
    Ok((
        auc,
        Curve {
            kind: CurveKind::Roc,
            points,
        },
    ))
}

/// Step-wise average precision: `AP = Σ (R_k − R_{k−1}) · P_k` over
/// descending distinct thresholds, with `R_0 = 0`.
pub fn pr_ap(samples: &[ScoredSample]) -> Result<(f64, Curve), MetricsError> {
    let (real, fake) = check_scores(samples)?;
    if fake == 0 {
        return Err(MetricsError::SingleClass { real, fake });
    }
    let p = fake as f64;
    let mut points = Vec::new();
    let mut ap = 0.0;
    let mut prev_tp = 0u64;
    for (tp, fp) in tie_groups(samples) {
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / p;
        ap += (tp - prev_tp) as f64 / p * precision;
        points.push((recall, precision));
        prev_tp = tp;
    }
    Ok((
        ap,
        Curve {
            kind: CurveKind::Pr,
            points,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub ap: f64,
    pub auc: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub degenerate: Vec<String>,
}

pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct FullReport {
    pub report: MetricsReport,
    pub roc: Curve,
    pub pr: Curve,
}

pub fn full_report(samples: &[ScoredSample]) -> Result<FullReport, MetricsError> {
    let counts = confusion(samples, DECISION_THRESHOLD)?;
    let (auc, roc) = roc_auc(samples)?;
    let (ap, pr) = pr_ap(samples)?;
    let b = basic_metrics(&counts);
    Ok(FullReport {
        report: MetricsReport {
            precision: b.precision,
            recall: b.recall,
            f1: b.f1,
            accuracy: b.accuracy,
            ap,
            auc,
            fpr: b.fpr,
            fnr: b.fnr,
            threshold: DECISION_THRESHOLD,
            counts,
            degenerate: b.degenerate,
        },
        roc,
        pr,
    })
}
