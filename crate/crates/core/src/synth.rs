//! Synthetic SAR-like scenes: unit-mean Gamma speckle with bright elliptical
//! targets, and datasets split into train/val/test.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npz::Archive;
use crate::rng::RngStream;
use crate::tensor::Tensor;

const MAX_PLACEMENTS: usize = 100;
pub const MANIFEST_ENTRY: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    /// Number of looks L; intensity speckle is Gamma(L, 1/L).
    pub speckle_looks: u32,
    pub target_count: usize,
    /// Multiplicative brightness of target interiors.
    pub target_contrast: f64,
    /// Inclusive range of ellipse semi-axes, in pixels.
    pub target_radii: (f64, f64),
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            height: 64,
            width: 64,
            speckle_looks: 4,
            target_count: 1,
            target_contrast: 5.0,
            target_radii: (3.0, 8.0),
            seed: 7,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32
            || self.width < 32
            || !self.height.is_multiple_of(8)
            || !self.width.is_multiple_of(8)
        {
            return Err(Error::arg(format!(
                "scene extents {}×{} must be at least 32 and divisible by 8",
                self.height, self.width
            )));
        }
        if self.speckle_looks == 0 {
            return Err(Error::arg("speckle looks must be positive"));
        }
        if !(self.target_contrast > 1.0) {
            return Err(Error::arg("target contrast must exceed 1"));
        }
        let (lo, hi) = self.target_radii;
        if !(lo >= 1.0 && hi >= lo) || 2.0 * hi >= self.height.min(self.width) as f64 {
            return Err(Error::arg(format!(
                "target radii ({lo}, {hi}) must satisfy 1 ≤ min ≤ max < extent/2"
            )));
        }
        Ok(())
    }
}

/// One scene: intensity image and binary target mask.
pub fn generate_scene(p: &SceneParams) -> Result<(Tensor, Tensor)> {
    p.validate()?;
    scene_from_stream(p, &mut RngStream::new(p.seed))
}

fn scene_from_stream(p: &SceneParams, rng: &mut RngStream) -> Result<(Tensor, Tensor)> {
    let (h, w) = (p.height, p.width);
    let looks = p.speckle_looks as f64;
    let gamma = Gamma::new(looks, 1.0 / looks).map_err(|e| Error::Numeric(e.to_string()))?;
    let mut image: Vec<f64> = (0..h * w).map(|_| gamma.sample(rng)).collect();
    let mut mask = vec![0u8; h * w];

    for _ in 0..p.target_count {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENTS {
            let a = rng.random_range(p.target_radii.0..=p.target_radii.1);
            let b = rng.random_range(p.target_radii.0..=p.target_radii.1);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let (sin, cos) = theta.sin_cos();
            let ex = (a * a * cos * cos + b * b * sin * sin).sqrt();
            let ey = (a * a * sin * sin + b * b * cos * cos).sqrt();
            if 2.0 * ex >= w as f64 || 2.0 * ey >= h as f64 {
                continue;
            }
            let cx = rng.random_range(ex..(w as f64 - ex));
            let cy = rng.random_range(ey..(h as f64 - ey));
            let inside: Vec<usize> = (0..h * w)
                .filter(|&k| {
                    let (x, y) = ((k % w) as f64 + 0.5 - cx, (k / w) as f64 + 0.5 - cy);
                    let u = x * cos + y * sin;
                    let v = -x * sin + y * cos;
                    (u / a).powi(2) + (v / b).powi(2) <= 1.0
                })
                .collect();
            if inside.is_empty() || inside.iter().any(|&k| mask[k] != 0) {
                continue;
            }
            for k in inside {
                mask[k] = 1;
                image[k] *= p.target_contrast;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Placement {
                attempts: MAX_PLACEMENTS,
            });
        }
    }
    Ok((
        Tensor::f32_from_f64(vec![h, w], &image)?,
        Tensor::from_u8(vec![h, w], mask)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Percentage of normal images used for training. The held-out normals
    /// are divided evenly between validation and test.
    pub train_percent: u32,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train_percent: 80 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: SceneParams,
    pub split_config: SplitConfig,
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub train: Vec<DatasetEntry>,
    pub val: Vec<DatasetEntry>,
    pub test: Vec<DatasetEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::arg(format!("unknown split {s:?}"))),
        }
    }
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[DatasetEntry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Split sizes `(train, val, test)` for normal images and `(val, test)` for
/// anomalous ones. Validation and test each receive
/// `floor(n·(100 − train%)/200)` normals and the remainder goes to train;
/// an odd anomalous image goes to test.
pub fn split_counts(
    n_normal: usize,
    n_anomalous: usize,
    cfg: SplitConfig,
) -> ((usize, usize, usize), (usize, usize)) {
    let held_each = n_normal * (100 - cfg.train_percent.min(100) as usize) / 200;
    let train = n_normal - 2 * held_each;
    let val_anom = n_anomalous / 2;
    (
        (train, held_each, held_each),
        (val_anom, n_anomalous - val_anom),
    )
}

/// Generates the dataset in memory. Normal images carry no targets; each
/// anomalous image carries `max(target_count, 1)` targets. Image `k` of each
/// class draws from its own derived stream.
pub fn build_dataset(
    p: &SceneParams,
    n_normal: usize,
    n_anomalous: usize,
    cfg: SplitConfig,
) -> Result<(Archive, DatasetManifest)> {
    p.validate()?;
    if n_normal < 5 || n_anomalous < 2 {
        return Err(Error::arg(format!(
            "need at least 5 normal and 2 anomalous images, got {n_normal} and {n_anomalous}"
        )));
    }
    if cfg.train_percent > 100 {
        return Err(Error::arg("train percentage exceeds 100"));
    }
    let ((n_train, n_val, n_test), (a_val, a_test)) = split_counts(n_normal, n_anomalous, cfg);
    if n_test == 0 || a_test == 0 {
        return Err(Error::Config(format!(
            "test split would have {n_test} normal and {a_test} anomalous images"
        )));
    }

    let jobs: Vec<(String, u8, u64)> = (0..n_normal)
        .map(|i| (format!("normal_{i:04}"), 0u8, 2 * i as u64))
        .chain((0..n_anomalous).map(|i| (format!("anomalous_{i:04}"), 1u8, 2 * i as u64 + 1)))
        .collect();
    let scenes = jobs
        .par_iter()
        .map(|(id, label, stream)| {
            let params = SceneParams {
                target_count: if *label == 0 {
                    0
                } else {
                    p.target_count.max(1)
                },
                ..*p
            };
            scene_from_stream(&params, &mut RngStream::child(p.seed, *stream)).map_err(
                |e| match e {
                    Error::Placement { .. } => Error::Config(format!("{id}: {e}")),
                    other => other,
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut archive = Archive::new();
    let mut entries = Vec::with_capacity(jobs.len());
    for ((id, label, _), (image, mask)) in jobs.iter().zip(scenes) {
        let entry = DatasetEntry {
            id: id.clone(),
            image: format!("img/{id}"),
            mask: format!("mask/{id}"),
            label: *label,
        };
        archive.insert_tensor(entry.image.clone(), image);
        archive.insert_tensor(entry.mask.clone(), mask);
        entries.push(entry);
    }
    let (normals, anomalous) = entries.split_at(n_normal);
    let manifest = DatasetManifest {
        generator: *p,
        split_config: cfg,
        n_normal,
        n_anomalous,
        train: normals[..n_train].to_vec(),
        val: normals[n_train..n_train + n_val]
            .iter()
            .chain(&anomalous[..a_val])
            .cloned()
            .collect(),
        test: normals[n_train + n_val..]
            .iter()
            .chain(&anomalous[a_val..a_val + a_test])
            .cloned()
            .collect(),
    };
    archive.insert_json(MANIFEST_ENTRY, &manifest)?;
    Ok((archive, manifest))
}

/// Generates the dataset and writes it as an archive at `out`.
pub fn generate_dataset(
    p: &SceneParams,
    n_normal: usize,
    n_anomalous: usize,
    cfg: SplitConfig,
    out: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let (archive, manifest) = build_dataset(p, n_normal, n_anomalous, cfg)?;
    archive.save(out)?;
    Ok(manifest)
}

/// A dataset archive with its parsed manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub archive: Archive,
}

impl Dataset {
    pub fn from_archive(archive: Archive) -> Result<Self> {
        let manifest = archive.json(MANIFEST_ENTRY)?;
        Ok(Dataset { manifest, archive })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(Archive::load(path)?)
    }

    pub fn split(&self, split: Split) -> &[DatasetEntry] {
        self.manifest.split(split)
    }

    pub fn image(&self, entry: &DatasetEntry) -> Result<&Tensor> {
        self.archive.tensor(&entry.image)
    }

    pub fn mask(&self, entry: &DatasetEntry) -> Result<&Tensor> {
        self.archive.tensor(&entry.mask)
    }
}
