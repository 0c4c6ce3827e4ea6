//! Patch-distribution anomaly detection for single-band (SAR-like) imagery.
//!
//! Normal images are embedded patch by patch, a Gaussian is fitted per grid
//! location, and test patches are scored either by Mahalanobis distance or by
//! the bounded adaptive cosine estimator against an anomaly signature.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anomaly_map;
pub mod bundle;
pub mod detectors;
pub mod embedding;
pub mod error;
pub mod gaussian;
pub mod linalg;
pub mod metrics;
pub mod npy;
pub mod npz;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use anomaly_map::{normalize_maps, render_map, AnomalyMap, PatchScoreMap};
pub use bundle::{BundleManifest, ModelBundle};
pub use detectors::{
    ace_score, ace_score_whitened, build_target_signature, mahalanobis_score, score_volume,
    Detector, ScoreValue, SignatureMode, TargetSignature,
};
pub use embedding::{assemble_embedding, toy_extract, EmbeddingVolume, FeaturePyramid};
pub use error::{Error, Result};
pub use gaussian::{
    fit_gaussians, make_isotropic, precompute_whitening, Aggregation, CovType, FitOptions,
    GaussianField, WhitenField,
};
pub use metrics::{aggregate_runs, auroc, pixel_auroc, threshold_mask, EvalReport, RunMetrics};
pub use npy::{read_tensor, write_tensor};
pub use npz::Archive;
pub use pipeline::PipelineConfig;
pub use rng::{choose_channel_indices, RngStream};
pub use synth::{
    generate_dataset, generate_scene, Dataset, DatasetManifest, SceneParams, SplitConfig,
};
pub use tensor::{DType, Tensor};
