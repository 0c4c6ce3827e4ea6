//! Patch scoring: Mahalanobis distance and the adaptive cosine estimator
//! (ACE), plus target signature construction.
//!
//! ACE measures the cosine between the target signature `s` and the sample
//! displacement `x − μ_b` after whitening by the background covariance:
//!
//! ```text
//!            sᵀ Σ⁻¹ (x − μ)
//! ACE = ─────────────────────────────────
//!       √(sᵀ Σ⁻¹ s) · √((x − μ)ᵀ Σ⁻¹ (x − μ))
//! ```
//!
//! The whitened form computes the same value as `ŝᵀ x̂ / ‖x̂‖` with
//! `ŝ = Ws / ‖Ws‖`, `x̂ = W(x − μ)` and `W Σ Wᵀ = I`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anomaly_map::PatchScoreMap;
use crate::embedding::EmbeddingVolume;
use crate::error::{Error, Result};
use crate::gaussian::{GaussianField, WhitenField};
use crate::linalg;
use crate::tensor::Tensor;

/// Quadratic forms down to this negative value are treated as roundoff.
const QUAD_FORM_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Detector {
    Ace,
    Mahalanobis,
}

impl Detector {
    pub fn as_str(self) -> &'static str {
        match self {
            Detector::Ace => "ace",
            Detector::Mahalanobis => "mahalanobis",
        }
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Detector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ace" => Ok(Detector::Ace),
            "mahalanobis" => Ok(Detector::Mahalanobis),
            _ => Err(Error::arg(format!("unknown detector {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignatureMode {
    #[default]
    Global,
    PerLocation,
}

impl SignatureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SignatureMode::Global => "global",
            SignatureMode::PerLocation => "per-location",
        }
    }
}

impl fmt::Display for SignatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SignatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(SignatureMode::Global),
            "per-location" | "per_location" => Ok(SignatureMode::PerLocation),
            _ => Err(Error::arg(format!("unknown signature mode {s:?}"))),
        }
    }
}

/// Representative of the anomalous class.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSignature {
    Global {
        vector: Vec<f64>,
        source_count: usize,
    },
    /// One `d`-vector per grid cell, row-major.
    PerLocation {
        grid: (usize, usize),
        dim: usize,
        vectors: Vec<f64>,
        source_count: usize,
    },
}

impl TargetSignature {
    pub fn mode(&self) -> SignatureMode {
        match self {
            TargetSignature::Global { .. } => SignatureMode::Global,
            TargetSignature::PerLocation { .. } => SignatureMode::PerLocation,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TargetSignature::Global { vector, .. } => vector.len(),
            TargetSignature::PerLocation { dim, .. } => *dim,
        }
    }

    pub fn source_count(&self) -> usize {
        match self {
            TargetSignature::Global { source_count, .. }
            | TargetSignature::PerLocation { source_count, .. } => *source_count,
        }
    }

    /// Signature vector used at `cell`.
    pub fn vector_at(&self, cell: usize) -> &[f64] {
        match self {
            TargetSignature::Global { vector, .. } => vector,
            TargetSignature::PerLocation { dim, vectors, .. } => {
                &vectors[cell * dim..(cell + 1) * dim]
            }
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            TargetSignature::Global { vector, .. } => vector,
            TargetSignature::PerLocation { vectors, .. } => vectors,
        }
    }
}

fn mask_positive(mask: &Tensor, cell: usize) -> bool {
    match mask.data() {
        crate::tensor::TensorData::U8(v) => v[cell] != 0,
        crate::tensor::TensorData::F32(v) => v[cell] != 0.0,
        crate::tensor::TensorData::F64(v) => v[cell] != 0.0,
    }
}

/// Averages anomalous patch embeddings into a target signature. With masks,
/// only mask-positive cells contribute. In per-location mode, cells without
/// any contributing sample take the global mean.
pub fn build_target_signature(
    anomalous: &[EmbeddingVolume],
    masks: Option<&[Tensor]>,
    mode: SignatureMode,
) -> Result<TargetSignature> {
    let first = anomalous
        .first()
        .ok_or_else(|| Error::arg("at least one anomalous volume is required"))?;
    let d = first.dim();
    let grid = first.grid();
    let cells = grid.0 * grid.1;
    if anomalous.iter().any(|v| v.dim() != d || v.grid() != grid) {
        return Err(Error::arg(
            "anomalous volumes must share dimension and grid",
        ));
    }
    if let Some(masks) = masks {
        if masks.len() != anomalous.len() {
            return Err(Error::arg(format!(
                "{} masks for {} volumes",
                masks.len(),
                anomalous.len()
            )));
        }
        for m in masks {
            m.expect_shape(&[grid.0, grid.1], "signature mask")?;
        }
    }

    let mut cell_sums = vec![0.0; cells * d];
    let mut cell_counts = vec![0usize; cells];
    for (n, vol) in anomalous.iter().enumerate() {
        let lm = vol.location_major();
        for cell in 0..cells {
            if masks.is_some_and(|m| !mask_positive(&m[n], cell)) {
                continue;
            }
            cell_counts[cell] += 1;
            for (acc, v) in cell_sums[cell * d..(cell + 1) * d]
                .iter_mut()
                .zip(&lm[cell * d..(cell + 1) * d])
            {
                *acc += v;
            }
        }
    }
    let total: usize = cell_counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptySignature);
    }
    let mut global = vec![0.0; d];
    for cell in 0..cells {
        for (g, v) in global.iter_mut().zip(&cell_sums[cell * d..(cell + 1) * d]) {
            *g += v;
        }
    }
    for g in &mut global {
        *g /= total as f64;
    }

    let sig = match mode {
        SignatureMode::Global => TargetSignature::Global {
            vector: global,
            source_count: total,
        },
        SignatureMode::PerLocation => {
            let mut vectors = vec![0.0; cells * d];
            for cell in 0..cells {
                let out = &mut vectors[cell * d..(cell + 1) * d];
                if cell_counts[cell] == 0 {
                    out.copy_from_slice(&global);
                } else {
                    let c = cell_counts[cell] as f64;
                    for (o, s) in out.iter_mut().zip(&cell_sums[cell * d..(cell + 1) * d]) {
                        *o = s / c;
                    }
                }
            }
            TargetSignature::PerLocation {
                grid,
                dim: d,
                vectors,
                source_count: total,
            }
        }
    };
    if sig.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "target signature has non-finite entries".into(),
        ));
    }
    Ok(sig)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreValue {
    pub value: f64,
    pub detector: Detector,
    /// Set when the displacement vanished and the score was defined as 0.
    pub degenerate: bool,
}

impl ScoreValue {
    fn new(value: f64, detector: Detector) -> Self {
        ScoreValue {
            value,
            detector,
            degenerate: false,
        }
    }

    fn degenerate(detector: Detector) -> Self {
        ScoreValue {
            value: 0.0,
            detector,
            degenerate: true,
        }
    }
}

fn displacement(x: &[f64], mu: &[f64]) -> Vec<f64> {
    x.iter().zip(mu).map(|(a, b)| a - b).collect()
}

fn checked_quad_form(q: f64, what: &str) -> Result<f64> {
    if q.is_nan() || q < -QUAD_FORM_SLACK {
        return Err(Error::Numeric(format!("{what} quadratic form is {q}")));
    }
    Ok(q.max(0.0))
}

/// `√((x − μ)ᵀ Σ⁻¹ (x − μ))`.
pub fn mahalanobis_score(x: &[f64], mu: &[f64], cov_inverse: &[f64]) -> Result<ScoreValue> {
    check_dims(x.len(), &[mu.len()], cov_inverse.len())?;
    let diff = displacement(x, mu);
    let q = checked_quad_form(linalg::bilinear(&diff, cov_inverse, &diff), "mahalanobis")?;
    Ok(ScoreValue::new(q.sqrt(), Detector::Mahalanobis))
}

/// ACE evaluated directly with the inverse background covariance.
pub fn ace_score(x: &[f64], s: &[f64], mu_b: &[f64], cov_inverse_b: &[f64]) -> Result<ScoreValue> {
    check_dims(x.len(), &[s.len(), mu_b.len()], cov_inverse_b.len())?;
    if linalg::norm(s) == 0.0 {
        return Err(Error::arg("target signature is the zero vector"));
    }
    let diff = displacement(x, mu_b);
    if diff.iter().all(|&v| v == 0.0) {
        return Ok(ScoreValue::degenerate(Detector::Ace));
    }
    let ss = linalg::bilinear(s, cov_inverse_b, s);
    if !(ss > 0.0) {
        return Err(Error::Numeric(format!("signature quadratic form is {ss}")));
    }
    let xx = checked_quad_form(linalg::bilinear(&diff, cov_inverse_b, &diff), "sample")?;
    if xx == 0.0 {
        return Ok(ScoreValue::degenerate(Detector::Ace));
    }
    let num = linalg::bilinear(s, cov_inverse_b, &diff);
    bounded_cosine(num / (ss.sqrt() * xx.sqrt()))
}

/// ACE in whitened coordinates. `s_whitened_unit` is `Ws / ‖Ws‖`.
pub fn ace_score_whitened(
    x: &[f64],
    s_whitened_unit: &[f64],
    whitener: &[f64],
    mu_b: &[f64],
) -> Result<ScoreValue> {
    check_dims(
        x.len(),
        &[s_whitened_unit.len(), mu_b.len()],
        whitener.len(),
    )?;
    let xw = linalg::matvec(whitener, &displacement(x, mu_b));
    cosine_with_unit(s_whitened_unit, &xw)
}

/// `Ws / ‖Ws‖`.
pub fn whiten_signature(s: &[f64], whitener: &[f64]) -> Result<Vec<f64>> {
    unit(linalg::matvec(whitener, s))
}

fn unit(v: Vec<f64>) -> Result<Vec<f64>> {
    let n = linalg::norm(&v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::arg(format!("cannot normalize vector with norm {n}")));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

fn cosine_with_unit(unit_s: &[f64], v: &[f64]) -> Result<ScoreValue> {
    let n = linalg::norm(v);
    if n == 0.0 {
        return Ok(ScoreValue::degenerate(Detector::Ace));
    }
    bounded_cosine(linalg::dot(unit_s, v) / n)
}

fn bounded_cosine(c: f64) -> Result<ScoreValue> {
    if c.is_nan() {
        return Err(Error::Numeric("ACE evaluated to NaN".into()));
    }
    Ok(ScoreValue::new(c.clamp(-1.0, 1.0), Detector::Ace))
}

fn check_dims(d: usize, others: &[usize], matrix_len: usize) -> Result<()> {
    if others.iter().any(|&n| n != d) || matrix_len != d * d {
        return Err(Error::arg(format!(
            "dimension mismatch: vectors {d} vs {others:?}, matrix of {matrix_len} entries"
        )));
    }
    Ok(())
}

/// How ACE is evaluated on a field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AcePath {
    #[default]
    Whitened,
    /// Explicit inverse covariance per cell; used for cross-checks.
    Direct,
}

enum Prepared {
    Mahalanobis,
    /// Per-cell whitened unit signature (plain unit signature for isotropic
    /// fields, where whitening is a scalar and cancels).
    AceWhitened(Vec<f64>),
    AceDirect(Vec<f64>),
}

/// Model state prepared for scoring many volumes.
pub struct Scorer<'a> {
    field: &'a GaussianField,
    whiten: &'a WhitenField,
    signature: Option<&'a TargetSignature>,
    detector: Detector,
    prepared: Prepared,
}

impl<'a> Scorer<'a> {
    pub fn new(
        field: &'a GaussianField,
        whiten: &'a WhitenField,
        signature: Option<&'a TargetSignature>,
        detector: Detector,
        path: AcePath,
    ) -> Result<Self> {
        let d = field.dim();
        let cells = field.cells();
        if whiten.dim() != d || whiten.cells() != cells || whiten.cov_type() != field.cov_type() {
            return Err(Error::arg(
                "whitening transforms do not match the Gaussian field",
            ));
        }
        let prepared = match detector {
            Detector::Mahalanobis => Prepared::Mahalanobis,
            Detector::Ace => {
                let sig = signature.ok_or_else(|| {
                    Error::Config(
                        "the ACE detector needs a target signature; build one first".into(),
                    )
                })?;
                if sig.dim() != d {
                    return Err(Error::arg(format!(
                        "signature dimension {} does not match field dimension {d}",
                        sig.dim()
                    )));
                }
                if let TargetSignature::PerLocation { grid, .. } = sig {
                    if *grid != field.grid() {
                        return Err(Error::arg(
                            "per-location signature grid does not match field",
                        ));
                    }
                }
                match path {
                    AcePath::Whitened => {
                        let units = (0..cells)
                            .into_par_iter()
                            .map(|cell| {
                                let s = sig.vector_at(cell);
                                match whiten {
                                    WhitenField::Isotropic { .. } => unit(s.to_vec()),
                                    _ => unit(whiten.apply(cell, s)),
                                }
                            })
                            .collect::<Result<Vec<Vec<f64>>>>()?;
                        Prepared::AceWhitened(units.concat())
                    }
                    AcePath::Direct => {
                        let inverses = (0..cells)
                            .into_par_iter()
                            .map(|cell| linalg::spd_inverse(&field.dense_covariance(cell), d))
                            .collect::<Result<Vec<Vec<f64>>>>()?;
                        Prepared::AceDirect(inverses.concat())
                    }
                }
            }
        };
        Ok(Scorer {
            field,
            whiten,
            signature,
            detector,
            prepared,
        })
    }

    pub fn detector(&self) -> Detector {
        self.detector
    }

    fn score_cell(&self, cell: usize, x: &[f64]) -> Result<ScoreValue> {
        let d = self.field.dim();
        let mu = self.field.mean_at(cell);
        match &self.prepared {
            // ‖W(x − μ)‖² = (x − μ)ᵀ Σ⁻¹ (x − μ) when W Σ Wᵀ = I
            Prepared::Mahalanobis => {
                let xw = self.whiten.apply(cell, &displacement(x, mu));
                Ok(ScoreValue::new(linalg::norm(&xw), Detector::Mahalanobis))
            }
            Prepared::AceWhitened(units) => {
                let s_hat = &units[cell * d..(cell + 1) * d];
                let diff = displacement(x, mu);
                match self.whiten {
                    WhitenField::Isotropic { .. } => cosine_with_unit(s_hat, &diff),
                    _ => cosine_with_unit(s_hat, &self.whiten.apply(cell, &diff)),
                }
            }
            Prepared::AceDirect(inverses) => {
                let sig = self.signature.expect("checked in constructor");
                ace_score(
                    x,
                    sig.vector_at(cell),
                    mu,
                    &inverses[cell * d * d..(cell + 1) * d * d],
                )
            }
        }
    }

    pub fn score(&self, vol: &EmbeddingVolume) -> Result<PatchScoreMap> {
        let d = self.field.dim();
        if vol.dim() != d || vol.grid() != self.field.grid() {
            return Err(Error::arg(format!(
                "volume d={} grid={:?} does not match field d={d} grid={:?}",
                vol.dim(),
                vol.grid(),
                self.field.grid()
            )));
        }
        let lm = vol.location_major();
        let values = lm
            .par_chunks(d)
            .enumerate()
            .map(|(cell, x)| self.score_cell(cell, x))
            .collect::<Result<Vec<ScoreValue>>>()?;
        let degenerate = values.iter().filter(|v| v.degenerate).count();
        PatchScoreMap::new(
            self.field.grid(),
            values.into_iter().map(|v| v.value).collect(),
            self.detector,
        )
        .map(|m| m.with_degenerate_cells(degenerate))
    }
}

/// Scores every grid cell of `vol`. ACE uses the whitened path.
pub fn score_volume(
    vol: &EmbeddingVolume,
    field: &GaussianField,
    whiten: &WhitenField,
    signature: Option<&TargetSignature>,
    detector: Detector,
) -> Result<PatchScoreMap> {
    Scorer::new(field, whiten, signature, detector, AcePath::Whitened)?.score(vol)
}
