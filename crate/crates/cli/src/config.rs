//! Run configuration: flags override the `--config` file, which overrides
//! the library defaults.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use patchace_core::{Aggregation, CovType, Detector, PipelineConfig, SignatureMode};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Every field a config file may set. Unknown keys are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector: Option<Detector>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cov_type: Option<CovType>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aggregation: Option<Aggregation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extractor_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub signature_mode: Option<SignatureMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub signature_masks: Option<bool>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON file with default values for the flags below.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// ace | mahalanobis [default: ace]
    #[arg(long)]
    pub detector: Option<Detector>,
    /// full | diagonal | isotropic [default: full]
    #[arg(long = "cov")]
    pub cov_type: Option<CovType>,
    /// mean-diagonal | mean-full | determinant | trace [default: mean-diagonal]
    #[arg(long = "agg")]
    pub aggregation: Option<Aggregation>,
    /// Number of embedding channels kept [default: 100]
    #[arg(long)]
    pub d: Option<usize>,
    /// Covariance regularization [default: 0.01]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Anomaly map blur in pixels [default: 4.0]
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Seed of the toy extractor weights [default: 0]
    #[arg(long)]
    pub extractor_seed: Option<u64>,
    /// Seed of the channel selection [default: 0]
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated run seeds
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub seeds: Option<Vec<u64>>,
    /// global | per-location [default: global]
    #[arg(long)]
    pub signature_mode: Option<SignatureMode>,
    /// Build the signature from mask-positive cells only
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub signature_masks: Option<bool>,
}

/// Fully resolved settings plus the run seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub seeds: Vec<u64>,
}

impl RunConfig {
    /// Config echo for reports and ablation bases. Paths are excluded so the
    /// fingerprint depends only on settings.
    pub fn to_file_config(&self) -> FileConfig {
        let p = &self.pipeline;
        FileConfig {
            detector: Some(p.detector),
            cov_type: Some(p.cov_type),
            aggregation: Some(p.aggregation),
            d: Some(p.d),
            epsilon: Some(p.epsilon),
            sigma: Some(p.sigma),
            extractor_seed: Some(p.extractor_seed),
            seed: None,
            seeds: Some(self.seeds.clone()),
            signature_mode: Some(p.signature_mode),
            signature_masks: Some(p.signature_masks),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self.to_file_config()).expect("config serializes")
    }
}

fn load_file(path: &PathBuf) -> Result<FileConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, Failure> {
        let file = match &self.config {
            Some(path) => load_file(path)?,
            None => FileConfig::default(),
        };
        let base = PipelineConfig::default();
        let pipeline = PipelineConfig {
            detector: self.detector.or(file.detector).unwrap_or(base.detector),
            cov_type: self.cov_type.or(file.cov_type).unwrap_or(base.cov_type),
            aggregation: self
                .aggregation
                .or(file.aggregation)
                .unwrap_or(base.aggregation),
            d: self.d.or(file.d).unwrap_or(base.d),
            epsilon: self.epsilon.or(file.epsilon).unwrap_or(base.epsilon),
            sigma: self.sigma.or(file.sigma).unwrap_or(base.sigma),
            extractor_seed: self
                .extractor_seed
                .or(file.extractor_seed)
                .unwrap_or(base.extractor_seed),
            seed: self.seed.or(file.seed).unwrap_or(base.seed),
            signature_mode: self
                .signature_mode
                .or(file.signature_mode)
                .unwrap_or(base.signature_mode),
            signature_masks: self
                .signature_masks
                .or(file.signature_masks)
                .unwrap_or(base.signature_masks),
        };
        // An explicit --seed replaces any seed list from the file.
        let seeds = match (&self.seeds, self.seed) {
            (Some(s), _) => s.clone(),
            (None, Some(s)) => vec![s],
            (None, None) => file.seeds.clone().unwrap_or_else(|| vec![pipeline.seed]),
        };
        if seeds.is_empty() {
            return Err(Failure::Usage("seed list is empty".into()));
        }
        if pipeline.d == 0 {
            return Err(Failure::Usage("--d must be at least 1".into()));
        }
        if !(pipeline.epsilon > 0.0) || !pipeline.epsilon.is_finite() {
            return Err(Failure::Usage(
                "--epsilon must be positive and finite".into(),
            ));
        }
        if !(pipeline.sigma >= 0.0) || !pipeline.sigma.is_finite() {
            return Err(Failure::Usage(
                "--sigma must be non-negative and finite".into(),
            ));
        }
        Ok(RunConfig { pipeline, seeds })
    }
}
