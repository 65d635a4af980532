//! Synthetic real/fake corpus: smooth random fields as "real" images, the
//! same kind of field plus a faint checkerboard as "fake" images.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::Label;
use crate::dataset::{DatasetError, DatasetManifest, ManifestEntry, Split};
use crate::image::{write_ppm, Image, ImageError};
use crate::perturb::blur_raw;
use crate::rng::{counter_word, derive_seed};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub width: usize,
    pub height: usize,
    pub amplitude: f64,
    /// Checkerboard period in pixels; must be even.
    pub period: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_per_class: 200,
            test_per_class: 100,
            width: 32,
            height: 32,
            amplitude: 0.08,
            period: 2,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..=0.5).contains(&self.amplitude) {
            return Err(SynthError::Spec(format!("amplitude {} outside [0, 0.5]", self.amplitude)));
        }
        if self.period < 2 || !self.period.is_multiple_of(2) {
            return Err(SynthError::Spec(format!("period {} must be even and at least 2", self.period)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SynthError::Spec("image size must be positive".into()));
        }
        Ok(())
    }
}

/// White noise smoothed by three 3x3 Gaussian passes (sigma 1), mapped
/// affinely so its extremes land on 0.2 and 0.8.
pub fn smooth_field(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..3 * width * height).map(|_| rng.random::<f64>()).collect();
    let mut img = Image::from_unclamped(width, height, noise);
    for _ in 0..3 {
        img = Image::from_unclamped(width, height, blur_raw(&img, 1.0));
    }
    let lo = img.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if hi > lo {
        img.data().iter().map(|v| 0.2 + 0.6 * (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; img.data().len()]
    };
    Image::from_unclamped(width, height, data)
}

/// `+1/-1` pattern alternating every `period / 2` pixels in both directions.
pub fn checkerboard(x: usize, y: usize, period: usize) -> f64 {
    let half = period / 2;
    if (x / half + y / half).is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

pub fn fake_image(width: usize, height: usize, amplitude: f64, period: usize, seed: u64) -> Image {
    let base = smooth_field(width, height, seed);
    let mut data = base.data().to_vec();
    for c in 0..3 {
        for y in 0..height {
            for x in 0..width {
                data[(c * height + y) * width + x] += amplitude * checkerboard(x, y, period);
            }
        }
    }
    Image::from_unclamped(width, height, data)
}

/// Writes `{train,test}/{real,fake}_NNNN.ppm` and `manifest.jsonl` under
/// `out_dir`. Image `k` in generation order uses stream word `k` of the
/// `datagen` sub-seed.
pub fn gen_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest, SynthError> {
    spec.validate()?;
    let datagen = derive_seed(spec.seed, "datagen");
    let mut entries = Vec::new();
    let mut k = 0u64;
    for (split, count) in [(Split::Train, spec.train_per_class), (Split::Test, spec.test_per_class)] {
        let dir = out_dir.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|source| SynthError::Io { path: dir.clone(), source })?;
        for label in [Label::Real, Label::Fake] {
            for i in 0..count {
                let seed = counter_word(datagen, k);
                k += 1;
                let img = match label {
                    Label::Real => smooth_field(spec.width, spec.height, seed),
                    Label::Fake => fake_image(spec.width, spec.height, spec.amplitude, spec.period, seed),
                };
                let rel = format!("{}/{}_{:04}.ppm", split.as_str(), label.as_str(), i);
                write_ppm(&img, &out_dir.join(&rel))?;
                entries.push(ManifestEntry { path: rel, label, split });
            }
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.save(&out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::read_ppm;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            train_per_class: 3,
            test_per_class: 2,
            width: 16,
            height: 12,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn field_range() {
        let f = smooth_field(32, 32, 3);
        let lo = f.data().iter().copied().fold(1.0, f64::min);
        let hi = f.data().iter().copied().fold(0.0, f64::max);
        assert!((lo - 0.2).abs() < 1e-12 && (hi - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_amplitude_fake_is_its_base() {
        assert_eq!(fake_image(16, 16, 0.0, 2, 9), smooth_field(16, 16, 9));
    }

    #[test]
    fn checkerboard_is_zero_mean() {
        for period in [2, 4] {
            let s: f64 = (0..8).flat_map(|y| (0..8).map(move |x| checkerboard(x, y, period))).sum();
            assert_eq!(s, 0.0);
        }
        assert_eq!(checkerboard(0, 0, 2), 1.0);
        assert_eq!(checkerboard(1, 0, 2), -1.0);
        assert_eq!(checkerboard(1, 1, 2), 1.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = gen_synthetic(&small(7), a.path()).unwrap();
        gen_synthetic(&small(7), b.path()).unwrap();
        assert_eq!(ma.entries.len(), 10);
        for e in &ma.entries {
            assert_eq!(fs::read(a.path().join(&e.path)).unwrap(), fs::read(b.path().join(&e.path)).unwrap());
        }
        assert_eq!(
            fs::read(a.path().join(MANIFEST_NAME)).unwrap(),
            fs::read(b.path().join(MANIFEST_NAME)).unwrap()
        );
        let loaded = DatasetManifest::load(&a.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(loaded.entries, ma.entries);
    }

    #[test]
    fn rejects_bad_spec() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = small(1);
        s.amplitude = 0.7;
        assert!(matches!(gen_synthetic(&s, dir.path()), Err(SynthError::Spec(_))));
        let mut s = small(1);
        s.period = 3;
        assert!(gen_synthetic(&s, dir.path()).is_err());
    }

    // |DFT| at (pi, pi), normalized by pixel count, averaged over channels.
    fn nyquist_energy(img: &Image) -> f64 {
        let (w, h) = (img.width(), img.height());
        (0..3)
            .map(|c| {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                        acc += sign * img.at(c, y, x);
                    }
                }
                acc.abs() / (w * h) as f64
            })
            .sum::<f64>()
            / 3.0
    }

    #[test]
    fn fakes_carry_checkerboard_energy() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            train_per_class: 50,
            test_per_class: 0,
            ..SyntheticSpec::default()
        };
        let m = gen_synthetic(&spec, dir.path()).unwrap();
        let mean = |label: Label| {
            let es: Vec<f64> = m
                .entries
                .iter()
                .filter(|e| e.label == label)
                .map(|e| nyquist_energy(&read_ppm(&m.resolve(e)).unwrap()))
                .collect();
            es.iter().sum::<f64>() / es.len() as f64
        };
        let (real, fake) = (mean(Label::Real), mean(Label::Fake));
        assert!(fake > real, "fake {fake} vs real {real}");
    }
}
