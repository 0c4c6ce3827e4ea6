//! End-to-end training and inference over a dataset archive.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anomaly_map::{render_map, AnomalyMap, PatchScoreMap, DEFAULT_SIGMA};
use crate::bundle::ModelBundle;
use crate::detectors::{build_target_signature, AcePath, Detector, Scorer, SignatureMode};
use crate::embedding::{assemble_embedding, toy_extract, EmbeddingVolume, FeaturePyramid};
use crate::error::{Error, Result};
use crate::gaussian::{fit_gaussians, precompute_whitening, Aggregation, CovType, FitOptions};
use crate::metrics::{auroc, pixel_auroc, RunMetrics};
use crate::npz::Archive;
use crate::rng::{choose_channel_indices, RngStream};
use crate::synth::{Dataset, DatasetEntry, Split};
use crate::tensor::{Tensor, TensorData};

pub const DEFAULT_D: usize = 100;
pub const DEFAULT_EPSILON: f64 = 0.01;

/// Settings shared by fitting, signature building and scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub detector: Detector,
    pub cov_type: CovType,
    pub aggregation: Aggregation,
    pub d: usize,
    pub epsilon: f64,
    pub sigma: f64,
    /// Seed of the toy extractor weights.
    pub extractor_seed: u64,
    /// Seed of the random channel selection.
    pub seed: u64,
    pub signature_mode: SignatureMode,
    /// Restrict the signature to mask-positive cells.
    pub signature_masks: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            detector: Detector::Ace,
            cov_type: CovType::Full,
            aggregation: Aggregation::MeanDiagonal,
            d: DEFAULT_D,
            epsilon: DEFAULT_EPSILON,
            sigma: DEFAULT_SIGMA,
            extractor_seed: 0,
            seed: 0,
            signature_mode: SignatureMode::Global,
            signature_masks: false,
        }
    }
}

/// Where feature pyramids come from.
#[derive(Debug, Clone, Copy)]
pub enum FeatureSource<'a> {
    Toy {
        seed: u64,
    },
    /// Pre-extracted pyramids, see [`FeatureArchive`].
    Archive(&'a FeatureArchive),
}

/// Pre-extracted pyramids. Entries are either per image (`level{k}/<id>`,
/// `C×H×W`) or batched (`level{k}`, `N×C×H×W`) with the image order listed
/// in `ids.json`.
#[derive(Debug, Clone)]
pub struct FeatureArchive {
    archive: Archive,
    batch_ids: Vec<String>,
}

pub const FEATURE_IDS_ENTRY: &str = "ids.json";

impl FeatureArchive {
    pub fn new(archive: Archive) -> Result<Self> {
        let batch_ids = if archive.contains(FEATURE_IDS_ENTRY) {
            archive.json(FEATURE_IDS_ENTRY)?
        } else {
            Vec::new()
        };
        Ok(FeatureArchive { archive, batch_ids })
    }

    /// Writes batched entries for pyramids sharing level shapes.
    pub fn from_pyramids(ids: &[String], pyramids: &[FeaturePyramid]) -> Result<Self> {
        if ids.len() != pyramids.len() || pyramids.is_empty() {
            return Err(Error::arg("need one pyramid per id and at least one"));
        }
        let mut archive = Archive::new();
        for k in 0..3 {
            let shape = pyramids[0].levels()[k].shape().to_vec();
            let mut data = Vec::new();
            for p in pyramids {
                let level = &p.levels()[k];
                level.expect_shape(&shape, "batched feature level")?;
                data.extend(level.to_f64_vec().into_iter().map(|v| v as f32));
            }
            let mut batched = vec![pyramids.len()];
            batched.extend(shape);
            archive.insert_tensor(format!("level{}", k + 1), Tensor::from_f32(batched, data)?);
        }
        archive.insert_json(FEATURE_IDS_ENTRY, &ids)?;
        Self::new(archive)
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    pub fn pyramid(&self, id: &str) -> Result<FeaturePyramid> {
        let per_image = format!("level1/{id}");
        if self.archive.contains(&per_image) {
            let levels = [1, 2, 3].map(|k| self.archive.tensor(&format!("level{k}/{id}")).cloned());
            let [a, b, c] = levels;
            return FeaturePyramid::new([a?, b?, c?]);
        }
        let index = self
            .batch_ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::Archive(format!("no features for image {id}")))?;
        let level = |k: usize| -> Result<Tensor> {
            let t = self.archive.tensor(&format!("level{k}"))?;
            if t.ndim() != 4 || t.shape()[0] != self.batch_ids.len() {
                return Err(Error::Format(format!(
                    "batched level{k} has shape {:?}",
                    t.shape()
                )));
            }
            let inner: Vec<usize> = t.shape()[1..].to_vec();
            let n: usize = inner.iter().product();
            let data = match t.data() {
                TensorData::F32(v) => TensorData::F32(v[index * n..(index + 1) * n].to_vec()),
                TensorData::F64(v) => TensorData::F64(v[index * n..(index + 1) * n].to_vec()),
                TensorData::U8(_) => return Err(Error::DType("u8 features".into())),
            };
            Tensor::new(inner, data)
        };
        FeaturePyramid::new([level(1)?, level(2)?, level(3)?])
    }
}

pub fn pyramid_for(
    source: FeatureSource<'_>,
    dataset: &Dataset,
    entry: &DatasetEntry,
) -> Result<FeaturePyramid> {
    match source {
        FeatureSource::Toy { seed } => toy_extract(dataset.image(entry)?, seed),
        FeatureSource::Archive(fa) => fa.pyramid(&entry.id),
    }
}

pub fn embed_entries(
    source: FeatureSource<'_>,
    dataset: &Dataset,
    entries: &[DatasetEntry],
    channel_indices: &[usize],
) -> Result<Vec<EmbeddingVolume>> {
    entries
        .par_iter()
        .map(|e| assemble_embedding(&pyramid_for(source, dataset, e)?, channel_indices))
        .collect()
}

fn source_for<'a>(features: Option<&'a FeatureArchive>, extractor_seed: u64) -> FeatureSource<'a> {
    match features {
        Some(fa) => FeatureSource::Archive(fa),
        None => FeatureSource::Toy {
            seed: extractor_seed,
        },
    }
}

/// Fits the background model on the train split.
pub fn fit_model(
    dataset: &Dataset,
    features: Option<&FeatureArchive>,
    cfg: &PipelineConfig,
) -> Result<ModelBundle> {
    let train = dataset.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    let source = source_for(features, cfg.extractor_seed);
    let total = pyramid_for(source, dataset, &train[0])?.total_channels();
    if cfg.d == 0 {
        return Err(Error::arg("d must be at least 1"));
    }
    let indices = choose_channel_indices(&mut RngStream::new(cfg.seed), total, cfg.d)?;
    let volumes = embed_entries(source, dataset, train, &indices)?;
    let field = fit_gaussians(
        &volumes,
        FitOptions {
            cov_type: cfg.cov_type,
            aggregation: cfg.aggregation,
            epsilon: cfg.epsilon,
        },
    )?;
    let whiten = precompute_whitening(&field)?;
    ModelBundle::new(
        &field,
        &whiten,
        indices,
        total,
        cfg.extractor_seed,
        cfg.seed,
    )
}

/// Downsamples a pixel mask to an embedding grid: a cell is positive when at
/// least half of the pixels mapping to it are positive.
pub fn mask_to_grid(mask: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    if mask.ndim() != 2 {
        return Err(Error::arg("mask must be H×W"));
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (gh, gw) = grid;
    if gh > h || gw > w || gh == 0 || gw == 0 {
        return Err(Error::arg("grid larger than mask"));
    }
    let values = mask.to_f64_vec();
    let mut pos = vec![0usize; gh * gw];
    let mut tot = vec![0usize; gh * gw];
    for y in 0..h {
        for x in 0..w {
            let cell = (y * gh / h) * gw + x * gw / w;
            tot[cell] += 1;
            if values[y * w + x] != 0.0 {
                pos[cell] += 1;
            }
        }
    }
    let data = pos
        .iter()
        .zip(&tot)
        .map(|(&p, &t)| u8::from(2 * p >= t && p > 0))
        .collect();
    Tensor::from_u8(vec![gh, gw], data)
}

/// Builds the target signature from the anomalous images of `split` using
/// the bundle's channel selection and extractor.
pub fn build_signature(
    bundle: ModelBundle,
    dataset: &Dataset,
    features: Option<&FeatureArchive>,
    split: Split,
    mode: SignatureMode,
    use_masks: bool,
) -> Result<ModelBundle> {
    let anomalous: Vec<DatasetEntry> = dataset
        .split(split)
        .iter()
        .filter(|e| e.label == 1)
        .cloned()
        .collect();
    if anomalous.is_empty() {
        return Err(Error::Config(format!(
            "{split:?} split has no anomalous images"
        )));
    }
    let source = source_for(features, bundle.manifest.extractor_seed);
    let total = pyramid_for(source, dataset, &anomalous[0])?.total_channels();
    if total != bundle.manifest.total_channels {
        return Err(Error::Config(format!(
            "features have {total} channels but the bundle selected from {}",
            bundle.manifest.total_channels
        )));
    }
    let volumes = embed_entries(
        source,
        dataset,
        &anomalous,
        &bundle.manifest.channel_indices,
    )?;
    let grid = volumes[0].grid();
    let masks = if use_masks {
        Some(
            anomalous
                .iter()
                .map(|e| mask_to_grid(dataset.mask(e)?, grid))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let sig = build_target_signature(&volumes, masks.as_deref(), mode)?;
    bundle.with_signature(sig)
}

/// Patch maps, rendered maps and labels for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSplit {
    pub detector: Detector,
    pub sigma: f64,
    pub ids: Vec<String>,
    pub labels: Vec<u8>,
    pub patches: Vec<PatchScoreMap>,
    pub maps: Vec<AnomalyMap>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ResultsIndex {
    detector: Detector,
    sigma: f64,
    ids: Vec<String>,
    labels: Vec<u8>,
}

pub const RESULTS_INDEX_ENTRY: &str = "results.json";

impl ScoredSplit {
    pub fn image_scores(&self) -> Vec<f64> {
        self.maps.iter().map(AnomalyMap::image_score).collect()
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.insert_json(
            RESULTS_INDEX_ENTRY,
            &ResultsIndex {
                detector: self.detector,
                sigma: self.sigma,
                ids: self.ids.clone(),
                labels: self.labels.clone(),
            },
        )?;
        for ((id, patch), map) in self.ids.iter().zip(&self.patches).zip(&self.maps) {
            a.insert_tensor(format!("patch/{id}"), patch.to_tensor());
            a.insert_tensor(format!("map/{id}"), map.to_tensor());
        }
        a.insert_tensor(
            "image_scores",
            Tensor::f32_from_f64(vec![self.ids.len()], &self.image_scores())?,
        );
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let index: ResultsIndex = a.json(RESULTS_INDEX_ENTRY)?;
        let patches = index
            .ids
            .iter()
            .map(|id| PatchScoreMap::from_tensor(a.tensor(&format!("patch/{id}"))?, index.detector))
            .collect::<Result<Vec<_>>>()?;
        let maps = index
            .ids
            .iter()
            .map(|id| AnomalyMap::from_tensor(a.tensor(&format!("map/{id}"))?, index.sigma))
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoredSplit {
            detector: index.detector,
            sigma: index.sigma,
            ids: index.ids,
            labels: index.labels,
            patches,
            maps,
        })
    }
}

/// Scores every image of `split`. Values are rounded to f32 so results match
/// what is persisted.
pub fn score_split(
    bundle: &ModelBundle,
    dataset: &Dataset,
    features: Option<&FeatureArchive>,
    split: Split,
    detector: Detector,
    sigma: f64,
) -> Result<ScoredSplit> {
    let entries = dataset.split(split);
    if entries.is_empty() {
        return Err(Error::Config(format!("{split:?} split is empty")));
    }
    let scorer = Scorer::new(
        &bundle.field,
        &bundle.whiten,
        bundle.signature.as_ref(),
        detector,
        AcePath::Whitened,
    )?;
    let source = source_for(features, bundle.manifest.extractor_seed);
    let scored = entries
        .par_iter()
        .map(|e| {
            let vol = assemble_embedding(
                &pyramid_for(source, dataset, e)?,
                &bundle.manifest.channel_indices,
            )?;
            let patch = scorer.score(&vol)?;
            let image = dataset.image(e)?;
            let map = render_map(&patch, image.shape()[0], image.shape()[1], sigma)?;
            let patch = PatchScoreMap::from_tensor(&patch.to_tensor(), detector)?;
            let map = AnomalyMap::from_tensor(&map.to_tensor(), sigma)?;
            Ok((patch, map))
        })
        .collect::<Result<Vec<_>>>()?;
    let (patches, maps) = scored.into_iter().unzip();
    Ok(ScoredSplit {
        detector,
        sigma,
        ids: entries.iter().map(|e| e.id.clone()).collect(),
        labels: entries.iter().map(|e| e.label).collect(),
        patches,
        maps,
    })
}

/// Image- and pixel-level AUROC of scored results against the dataset.
pub fn evaluate(results: &ScoredSplit, dataset: &Dataset, seed: u64) -> Result<RunMetrics> {
    let labels: Vec<bool> = results.labels.iter().map(|&l| l == 1).collect();
    let image_auroc = auroc(&results.image_scores(), &labels)?;
    let masks = results
        .ids
        .iter()
        .map(|id| dataset.archive.tensor(&format!("mask/{id}")).cloned())
        .collect::<Result<Vec<_>>>()?;
    let pixel = pixel_auroc(&results.maps, &masks)?;
    Ok(RunMetrics {
        seed,
        image_auroc,
        pixel_auroc: Some(pixel),
    })
}

/// Fit, signature (ACE only), score the test split and evaluate.
pub fn run_once(
    dataset: &Dataset,
    features: Option<&FeatureArchive>,
    cfg: &PipelineConfig,
) -> Result<(ScoredSplit, RunMetrics)> {
    let mut bundle = fit_model(dataset, features, cfg)?;
    if cfg.detector == Detector::Ace {
        bundle = build_signature(
            bundle,
            dataset,
            features,
            Split::Val,
            cfg.signature_mode,
            cfg.signature_masks,
        )?;
    }
    let results = score_split(
        &bundle,
        dataset,
        features,
        Split::Test,
        cfg.detector,
        cfg.sigma,
    )?;
    let metrics = evaluate(&results, dataset, cfg.seed)?;
    Ok((results, metrics))
}
