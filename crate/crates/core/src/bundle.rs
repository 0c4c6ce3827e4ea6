//! Persisted model: a ZIP holding `manifest.json` and f32 NPY entries for the
//! Gaussian field, its whitening transforms and the optional target signature.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detectors::{SignatureMode, TargetSignature};
use crate::error::{Error, Result};
use crate::gaussian::{Aggregation, CovType, Covariance, GaussianField, WhitenField};
use crate::npz::Archive;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const MEANS: &str = "means";
const COVARIANCE: &str = "covariance";
const WHITENING: &str = "whitening";
const SIGNATURE: &str = "signature";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub d: usize,
    pub grid: [usize; 2],
    pub cov_type: CovType,
    pub epsilon: f64,
    pub aggregation: Aggregation,
    pub channel_indices: Vec<usize>,
    /// Concatenated channel count the indices select from.
    pub total_channels: usize,
    pub extractor_seed: u64,
    pub selection_seed: u64,
    pub sample_count: usize,
    pub signature_mode: Option<SignatureMode>,
    pub signature_source_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub manifest: BundleManifest,
    pub field: GaussianField,
    pub whiten: WhitenField,
    pub signature: Option<TargetSignature>,
}

fn f32_round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

impl ModelBundle {
    /// Assembles a bundle. Tensor values are rounded to f32 so that the
    /// in-memory model is exactly what a reload would produce.
    pub fn new(
        field: &GaussianField,
        whiten: &WhitenField,
        channel_indices: Vec<usize>,
        total_channels: usize,
        extractor_seed: u64,
        selection_seed: u64,
    ) -> Result<Self> {
        let (h, w) = field.grid();
        let manifest = BundleManifest {
            format_version: FORMAT_VERSION,
            d: field.dim(),
            grid: [h, w],
            cov_type: field.cov_type(),
            epsilon: field.epsilon(),
            aggregation: field.aggregation(),
            channel_indices,
            total_channels,
            extractor_seed,
            selection_seed,
            sample_count: field.sample_count(),
            signature_mode: None,
            signature_source_count: None,
        };
        let archive = Self::encode(&manifest, field, whiten, None)?;
        Self::from_archive(&archive)
    }

    /// Replaces the target signature (rounded to f32 like every tensor).
    pub fn with_signature(mut self, sig: TargetSignature) -> Result<Self> {
        if sig.dim() != self.manifest.d {
            return Err(Error::arg(format!(
                "signature dimension {} does not match bundle d={}",
                sig.dim(),
                self.manifest.d
            )));
        }
        let sig = match sig {
            TargetSignature::Global {
                vector,
                source_count,
            } => TargetSignature::Global {
                vector: f32_round(&vector),
                source_count,
            },
            TargetSignature::PerLocation {
                grid,
                dim,
                vectors,
                source_count,
            } => {
                if [grid.0, grid.1] != self.manifest.grid {
                    return Err(Error::arg(
                        "per-location signature grid does not match bundle",
                    ));
                }
                TargetSignature::PerLocation {
                    grid,
                    dim,
                    vectors: f32_round(&vectors),
                    source_count,
                }
            }
        };
        self.manifest.signature_mode = Some(sig.mode());
        self.manifest.signature_source_count = Some(sig.source_count());
        self.signature = Some(sig);
        Ok(self)
    }

    fn encode(
        manifest: &BundleManifest,
        field: &GaussianField,
        whiten: &WhitenField,
        signature: Option<&TargetSignature>,
    ) -> Result<Archive> {
        let [h, w] = manifest.grid;
        let d = manifest.d;
        let layout = |cov_type: CovType| match cov_type {
            CovType::Full => vec![h, w, d, d],
            CovType::Diagonal => vec![h, w, d],
            CovType::Isotropic => vec![h, w],
        };
        let mut a = Archive::new();
        a.insert_json(MANIFEST, manifest)?;
        a.insert_tensor(MEANS, Tensor::f32_from_f64(vec![h, w, d], field.means())?);
        a.insert_tensor(
            COVARIANCE,
            Tensor::f32_from_f64(layout(field.cov_type()), field.covariance().values())?,
        );
        a.insert_tensor(
            WHITENING,
            Tensor::f32_from_f64(layout(whiten.cov_type()), whiten.values())?,
        );
        if let Some(sig) = signature {
            let shape = match sig {
                TargetSignature::Global { .. } => vec![d],
                TargetSignature::PerLocation { .. } => vec![h, w, d],
            };
            a.insert_tensor(SIGNATURE, Tensor::f32_from_f64(shape, sig.values())?);
        }
        Ok(a)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        Self::encode(
            &self.manifest,
            &self.field,
            &self.whiten,
            self.signature.as_ref(),
        )
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let manifest: BundleManifest = a.json(MANIFEST)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "bundle format version {} is not supported",
                manifest.format_version
            )));
        }
        let [h, w] = manifest.grid;
        let d = manifest.d;
        if manifest.channel_indices.len() != d {
            return Err(Error::Format(format!(
                "manifest lists {} channel indices for d={d}",
                manifest.channel_indices.len()
            )));
        }
        let tensor = |name: &str, shape: Vec<usize>| -> Result<Vec<f64>> {
            let t = a.tensor(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "bundle entry {name} has shape {:?}, manifest implies {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.to_f64_vec())
        };
        let means = tensor(MEANS, vec![h, w, d])?;
        let (covariance, whiten) = match manifest.cov_type {
            CovType::Full => (
                Covariance::Full(tensor(COVARIANCE, vec![h, w, d, d])?),
                WhitenField::Full {
                    dim: d,
                    transforms: tensor(WHITENING, vec![h, w, d, d])?,
                },
            ),
            CovType::Diagonal => (
                Covariance::Diagonal(tensor(COVARIANCE, vec![h, w, d])?),
                WhitenField::Diagonal {
                    dim: d,
                    scales: tensor(WHITENING, vec![h, w, d])?,
                },
            ),
            CovType::Isotropic => (
                Covariance::Isotropic(tensor(COVARIANCE, vec![h, w])?),
                WhitenField::Isotropic {
                    dim: d,
                    scales: tensor(WHITENING, vec![h, w])?,
                },
            ),
        };
        let field = GaussianField::from_parts(
            (h, w),
            d,
            means,
            covariance,
            manifest.aggregation,
            manifest.epsilon,
            manifest.sample_count,
        )?;
        let signature = match manifest.signature_mode {
            None => None,
            Some(mode) => {
                let source_count = manifest
                    .signature_source_count
                    .ok_or_else(|| Error::Format("signature without source count".into()))?;
                Some(match mode {
                    SignatureMode::Global => TargetSignature::Global {
                        vector: tensor(SIGNATURE, vec![d])?,
                        source_count,
                    },
                    SignatureMode::PerLocation => TargetSignature::PerLocation {
                        grid: (h, w),
                        dim: d,
                        vectors: tensor(SIGNATURE, vec![h, w, d])?,
                        source_count,
                    },
                })
            }
        };
        Ok(ModelBundle {
            manifest,
            field,
            whiten,
            signature,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}
