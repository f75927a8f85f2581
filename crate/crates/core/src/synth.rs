//! Synthetic binary classification with ground-truth saliency and a
//! controllable shortcut feature.
//!
//! Every image is mid-gray Gaussian noise holding two non-overlapping patches:
//!
//! * the salient patch carries the label as stripe orientation (label 0:
//!   horizontal stripes, label 1: vertical stripes) and is exactly what the
//!   saliency mask marks;
//! * the spurious patch is a bright square present iff `spurious_flag = 1`.
//!
//! The probability that `spurious_flag == label` differs between the train and
//! test splits, so a model that latches onto the bright square fails under
//! the shift while one that reads the stripes does not.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{Image, SaliencyMap};
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::Tensor;

pub const SPURIOUS_INTENSITY: f64 = 0.9;
const BACKGROUND: f64 = 0.5;
const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub salient_patch_size: usize,
    pub spurious_patch_size: usize,
    pub spurious_corr_train: f64,
    pub spurious_corr_test: f64,
    pub noise_std: f64,
    /// Half the peak-to-peak intensity swing of the stripes around mid-gray.
    pub stripe_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            n_train: 2000,
            n_test: 1000,
            salient_patch_size: 8,
            spurious_patch_size: 6,
            spurious_corr_train: 0.95,
            spurious_corr_test: 0.05,
            noise_std: 0.05,
            stripe_amplitude: 0.15,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::invalid("image_size", "must be positive"));
        }
        for (name, p) in [
            ("salient_patch_size", self.salient_patch_size),
            ("spurious_patch_size", self.spurious_patch_size),
        ] {
            if p == 0 || p > self.image_size {
                return Err(Error::invalid(name, format!("{p} does not fit a {} image", self.image_size)));
            }
        }
        for (name, c) in [
            ("spurious_corr_train", self.spurious_corr_train),
            ("spurious_corr_test", self.spurious_corr_test),
        ] {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::invalid(name, format!("{c} outside [0, 1]")));
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std", "must be non-negative"));
        }
        if !(0.0..=0.5).contains(&self.stripe_amplitude) {
            return Err(Error::invalid("stripe_amplitude", "must lie in [0, 0.5]"));
        }
        if self.n_train < 2 || self.n_test < 2 {
            return Err(Error::invalid("n_train/n_test", "need at least one sample per class"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub saliency: SaliencyMap,
    pub label: usize,
    pub spurious_flag: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    row: usize,
    col: usize,
    size: usize,
}

impl Rect {
    fn overlaps(&self, o: &Rect) -> bool {
        self.row < o.row + o.size
            && o.row < self.row + self.size
            && self.col < o.col + o.size
            && o.col < self.col + self.size
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        (self.row..self.row + self.size).contains(&r) && (self.col..self.col + self.size).contains(&c)
    }
}

pub fn generate_sample(cfg: &SynthConfig, label: usize, spurious_flag: usize, rng: &mut impl Rng) -> Result<Sample> {
    cfg.validate()?;
    if label > 1 || spurious_flag > 1 {
        return Err(Error::invalid("label/spurious_flag", "must be 0 or 1"));
    }
    let n = cfg.image_size;
    let random_rect = |rng: &mut dyn rand::RngCore, size: usize| Rect {
        row: rng.random_range(0..=n - size),
        col: rng.random_range(0..=n - size),
        size,
    };
    let mut placed = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let salient = random_rect(rng, cfg.salient_patch_size);
        let spurious = random_rect(rng, cfg.spurious_patch_size);
        if !salient.overlaps(&spurious) {
            placed = Some((salient, spurious));
            break;
        }
    }
    let (salient, spurious) = placed.ok_or(Error::Placement(PLACEMENT_ATTEMPTS))?;

    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::invalid("noise_std", e.to_string()))?;
    let mut pixels = vec![0.0; n * n];
    let mut weights = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let base = if salient.contains(r, c) {
                weights[r * n + c] = 1.0;
                // stripes alternate every pixel: along rows for label 0, along columns for label 1
                let phase = if label == 0 { r - salient.row } else { c - salient.col };
                if phase % 2 == 0 {
                    BACKGROUND + cfg.stripe_amplitude
                } else {
                    BACKGROUND - cfg.stripe_amplitude
                }
            } else if spurious_flag == 1 && spurious.contains(r, c) {
                SPURIOUS_INTENSITY
            } else {
                BACKGROUND
            };
            let jitter = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            pixels[r * n + c] = (base + jitter).clamp(0.0, 1.0);
        }
    }
    Ok(Sample {
        image: Image::new(n, n, 1, pixels)?,
        saliency: SaliencyMap::new(n, n, weights)?,
        label,
        spurious_flag,
    })
}

/// Difference of vertical and horizontal gradient energy inside the salient
/// region; positive for horizontal stripes (label 0).
pub fn stripe_orientation_score(sample: &Sample) -> f64 {
    let img = &sample.image;
    let s = &sample.saliency;
    let (h, w) = (img.height(), img.width());
    let mut vertical = 0.0;
    let mut horizontal = 0.0;
    for r in 0..h {
        for c in 0..w {
            if s.get(r, c) < 0.5 {
                continue;
            }
            if r + 1 < h && s.get(r + 1, c) >= 0.5 {
                vertical += (img.get(r + 1, c, 0) - img.get(r, c, 0)).powi(2);
            }
            if c + 1 < w && s.get(r, c + 1) >= 0.5 {
                horizontal += (img.get(r, c + 1, 0) - img.get(r, c, 0)).powi(2);
            }
        }
    }
    vertical - horizontal
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn generate_split(cfg: &SynthConfig, n: usize, corr: f64, stream: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, &[stream]));
    let mut plan = Vec::with_capacity(n);
    for label in 0..2 {
        let count = if label == 0 { n / 2 } else { n - n / 2 };
        let matching = (corr * count as f64).round() as usize;
        let mut flags: Vec<usize> = (0..count)
            .map(|i| if i < matching { label } else { 1 - label })
            .collect();
        flags.shuffle(&mut rng);
        plan.extend(flags.into_iter().map(|f| (label, f)));
    }
    plan.shuffle(&mut rng);
    plan.iter()
        .enumerate()
        .map(|(i, &(label, flag))| {
            let mut srng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, &[stream, i as u64]));
            generate_sample(cfg, label, flag, &mut srng)
        })
        .collect()
}

/// Class-balanced train and test splits. Within each class exactly
/// `round(corr * class_size)` samples have `spurious_flag == label`.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    Ok(Dataset {
        train: generate_split(cfg, cfg.n_train, cfg.spurious_corr_train, seeds::stream::TRAIN_SPLIT)?,
        test: generate_split(cfg, cfg.n_test, cfg.spurious_corr_test, seeds::stream::TEST_SPLIT)?,
    })
}

/// `(N, C, H, W)` stack of sample images.
pub fn images_tensor(samples: &[Sample]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("samples", "empty split"))?;
    let (c, h, w) = (first.image.channels(), first.image.height(), first.image.width());
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if !s.image.same_shape(&first.image) {
            return Err(Error::invalid("samples", "images differ in shape"));
        }
        data.extend(s.image.to_chw());
    }
    Tensor::new(vec![samples.len(), c, h, w], data)
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    index: usize,
    label: usize,
    spurious_flag: usize,
    split: String,
}

/// Writes `images/NNNN.png`, `saliency/NNNN.png` and `labels.csv`.
/// Indices run over the train split first, then the test split.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let saliency = dir.join("saliency");
    for d in [&images, &saliency] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let labels_path = dir.join("labels.csv");
    let mut wtr = csv::Writer::from_path(&labels_path)?;
    let all = ds
        .train
        .iter()
        .map(|s| (s, "train"))
        .chain(ds.test.iter().map(|s| (s, "test")));
    for (index, (s, split)) in all.enumerate() {
        s.image.save_png(&images.join(format!("{index:04}.png")))?;
        s.saliency.save_png(&saliency.join(format!("{index:04}.png")))?;
        wtr.serialize(LabelRow {
            index,
            label: s.label,
            spurious_flag: s.spurious_flag,
            split: split.to_string(),
        })?;
    }
    wtr.flush().map_err(|e| Error::io(&labels_path, e))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let labels_path = dir.join("labels.csv");
    if !labels_path.exists() {
        return Err(Error::io(
            &labels_path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset labels not found"),
        ));
    }
    let mut rdr = csv::Reader::from_path(&labels_path)?;
    let mut ds = Dataset {
        train: Vec::new(),
        test: Vec::new(),
    };
    for row in rdr.deserialize() {
        let row: LabelRow = row?;
        let sample = Sample {
            image: Image::load_png(&dir.join("images").join(format!("{:04}.png", row.index)))?,
            saliency: SaliencyMap::load_png(&dir.join("saliency").join(format!("{:04}.png", row.index)))?,
            label: row.label,
            spurious_flag: row.spurious_flag,
        };
        match row.split.as_str() {
            "train" => ds.train.push(sample),
            "test" => ds.test.push(sample),
            other => return Err(Error::invalid("split", format!("unknown split `{other}`"))),
        }
    }
    Ok(ds)
}
