//! Per-location Gaussian background model over patch embeddings and the
//! whitening transforms derived from it.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVolume;
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovType {
    Full,
    Diagonal,
    Isotropic,
}

/// Reduction of a full covariance matrix to the single variance of an
/// isotropic model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    MeanDiagonal,
    MeanFull,
    Determinant,
    Trace,
}

impl CovType {
    pub const ALL: [CovType; 3] = [CovType::Full, CovType::Diagonal, CovType::Isotropic];

    pub fn as_str(self) -> &'static str {
        match self {
            CovType::Full => "full",
            CovType::Diagonal => "diagonal",
            CovType::Isotropic => "isotropic",
        }
    }
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [
        Aggregation::MeanDiagonal,
        Aggregation::MeanFull,
        Aggregation::Determinant,
        Aggregation::Trace,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::MeanDiagonal => "mean-diagonal",
            Aggregation::MeanFull => "mean-full",
            Aggregation::Determinant => "determinant",
            Aggregation::Trace => "trace",
        }
    }
}

impl fmt::Display for CovType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CovType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CovType::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::arg(format!("unknown covariance type {s:?}")))
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Aggregation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::arg(format!("unknown aggregation {s:?}")))
    }
}

/// Covariance storage, one block per grid location in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    /// `d × d` per location.
    Full(Vec<f64>),
    /// `d` variances per location.
    Diagonal(Vec<f64>),
    /// One variance per location.
    Isotropic(Vec<f64>),
}

impl Covariance {
    pub fn cov_type(&self) -> CovType {
        match self {
            Covariance::Full(_) => CovType::Full,
            Covariance::Diagonal(_) => CovType::Diagonal,
            Covariance::Isotropic(_) => CovType::Isotropic,
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Covariance::Full(v) | Covariance::Diagonal(v) | Covariance::Isotropic(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub cov_type: CovType,
    pub aggregation: Aggregation,
    pub epsilon: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            cov_type: CovType::Full,
            aggregation: Aggregation::MeanDiagonal,
            epsilon: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    grid: (usize, usize),
    dim: usize,
    means: Vec<f64>,
    covariance: Covariance,
    aggregation: Aggregation,
    epsilon: f64,
    sample_count: usize,
}

impl GaussianField {
    /// Assembles a field from raw parts, checking extents and regularization.
    pub fn from_parts(
        grid: (usize, usize),
        dim: usize,
        means: Vec<f64>,
        covariance: Covariance,
        aggregation: Aggregation,
        epsilon: f64,
        sample_count: usize,
    ) -> Result<Self> {
        let cells = grid.0 * grid.1;
        if !(epsilon > 0.0) {
            return Err(Error::arg(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if means.len() != cells * dim {
            return Err(Error::arg("means do not match grid and dimension"));
        }
        let expected = match covariance {
            Covariance::Full(_) => cells * dim * dim,
            Covariance::Diagonal(_) => cells * dim,
            Covariance::Isotropic(_) => cells,
        };
        if covariance.values().len() != expected {
            return Err(Error::arg("covariance does not match grid and dimension"));
        }
        Ok(GaussianField {
            grid,
            dim,
            means,
            covariance,
            aggregation,
            epsilon,
            sample_count,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cov_type(&self) -> CovType {
        self.covariance.cov_type()
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn covariance(&self) -> &Covariance {
        &self.covariance
    }

    /// Mean vector at flat cell index `cell` (row-major over the grid).
    pub fn mean_at(&self, cell: usize) -> &[f64] {
        &self.means[cell * self.dim..(cell + 1) * self.dim]
    }

    /// Dense `d × d` covariance at `cell`, whatever the storage layout.
    pub fn dense_covariance(&self, cell: usize) -> Vec<f64> {
        let d = self.dim;
        match &self.covariance {
            Covariance::Full(v) => v[cell * d * d..(cell + 1) * d * d].to_vec(),
            Covariance::Diagonal(v) => {
                let mut m = vec![0.0; d * d];
                for k in 0..d {
                    m[k * d + k] = v[cell * d + k];
                }
                m
            }
            Covariance::Isotropic(v) => {
                let mut m = vec![0.0; d * d];
                for k in 0..d {
                    m[k * d + k] = v[cell];
                }
                m
            }
        }
    }
}

/// Fits one Gaussian per grid location from normal-image embeddings.
///
/// Means are sample means; the full covariance is the unbiased sample
/// covariance (zero when N = 1) plus `epsilon·I`. Diagonal and isotropic
/// variants are derived from that regularized matrix.
pub fn fit_gaussians(embeddings: &[EmbeddingVolume], opts: FitOptions) -> Result<GaussianField> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::arg("at least one embedding volume is required"))?;
    if !(opts.epsilon > 0.0) {
        return Err(Error::arg(format!(
            "epsilon must be positive, got {}",
            opts.epsilon
        )));
    }
    let d = first.dim();
    let grid = first.grid();
    for (n, vol) in embeddings.iter().enumerate() {
        if vol.dim() != d || vol.grid() != grid {
            return Err(Error::arg(format!(
                "volume {n} has d={} grid={:?}, expected d={d} grid={grid:?}",
                vol.dim(),
                vol.grid()
            )));
        }
    }
    let n = embeddings.len();
    let cells = grid.0 * grid.1;
    let samples: Vec<Vec<f64>> = embeddings
        .iter()
        .map(EmbeddingVolume::location_major)
        .collect();

    let mut means = vec![0.0; cells * d];
    means
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(cell, mean)| {
            for s in &samples {
                for (m, v) in mean.iter_mut().zip(&s[cell * d..(cell + 1) * d]) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= n as f64;
            }
        });

    let full_at = |cell: usize| -> Vec<f64> {
        let mean = &means[cell * d..(cell + 1) * d];
        let mut cov = vec![0.0; d * d];
        let mut centered = vec![0.0; d];
        for s in &samples {
            for (c, (v, m)) in centered
                .iter_mut()
                .zip(s[cell * d..(cell + 1) * d].iter().zip(mean))
            {
                *c = v - m;
            }
            for i in 0..d {
                let ci = centered[i];
                let row = &mut cov[i * d..(i + 1) * d];
                for j in i..d {
                    row[j] += ci * centered[j];
                }
            }
        }
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        for i in 0..d {
            for j in i..d {
                let v = if n > 1 { cov[i * d + j] / denom } else { 0.0 };
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
            cov[i * d + i] += opts.epsilon;
        }
        cov
    };

    let covariance = match opts.cov_type {
        CovType::Full => {
            let mut all = vec![0.0; cells * d * d];
            all.par_chunks_mut(d * d)
                .enumerate()
                .for_each(|(cell, out)| out.copy_from_slice(&full_at(cell)));
            Covariance::Full(all)
        }
        CovType::Diagonal => {
            let mut all = vec![0.0; cells * d];
            all.par_chunks_mut(d).enumerate().for_each(|(cell, out)| {
                let full = full_at(cell);
                for k in 0..d {
                    out[k] = full[k * d + k];
                }
            });
            Covariance::Diagonal(all)
        }
        CovType::Isotropic => {
            let all = (0..cells)
                .into_par_iter()
                .map(|cell| {
                    make_isotropic(&full_at(cell), d, opts.aggregation, opts.epsilon)
                        .map_err(|e| Error::Numeric(format!("cell {cell}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            Covariance::Isotropic(all)
        }
    };

    GaussianField::from_parts(
        grid,
        d,
        means,
        covariance,
        opts.aggregation,
        opts.epsilon,
        n,
    )
}

/// Collapses a symmetric `d × d` covariance to an isotropic variance, floored
/// at `epsilon`.
pub fn make_isotropic(
    cov: &[f64],
    d: usize,
    aggregation: Aggregation,
    epsilon: f64,
) -> Result<f64> {
    if cov.len() != d * d || d == 0 {
        return Err(Error::arg(format!("expected a {d}×{d} matrix")));
    }
    let trace: f64 = (0..d).map(|k| cov[k * d + k]).sum();
    let value = match aggregation {
        Aggregation::MeanDiagonal => trace / d as f64,
        Aggregation::MeanFull => cov.iter().sum::<f64>() / (d * d) as f64,
        Aggregation::Determinant => linalg::determinant(cov, d),
        Aggregation::Trace => trace,
    };
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "{aggregation} aggregation is not finite ({value})"
        )));
    }
    let floored = value.max(epsilon);
    if !(floored > 0.0) {
        return Err(Error::Numeric(format!(
            "isotropic variance {floored} is not positive"
        )));
    }
    Ok(floored)
}

/// Per-location whitening transforms `W` with `W Σ Wᵀ = I`.
#[derive(Debug, Clone, PartialEq)]
pub enum WhitenField {
    /// Dense `d × d` matrices `D^(-1/2) Uᵀ` per location.
    Full { dim: usize, transforms: Vec<f64> },
    /// `σ_k^(-1/2)` per channel and location.
    Diagonal { dim: usize, scales: Vec<f64> },
    /// `σ^(-1/2)` per location.
    Isotropic { dim: usize, scales: Vec<f64> },
}

impl WhitenField {
    pub fn dim(&self) -> usize {
        match self {
            WhitenField::Full { dim, .. }
            | WhitenField::Diagonal { dim, .. }
            | WhitenField::Isotropic { dim, .. } => *dim,
        }
    }

    pub fn cov_type(&self) -> CovType {
        match self {
            WhitenField::Full { .. } => CovType::Full,
            WhitenField::Diagonal { .. } => CovType::Diagonal,
            WhitenField::Isotropic { .. } => CovType::Isotropic,
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            WhitenField::Full { transforms, .. } => transforms,
            WhitenField::Diagonal { scales, .. } | WhitenField::Isotropic { scales, .. } => scales,
        }
    }

    pub fn cells(&self) -> usize {
        let d = self.dim();
        match self {
            WhitenField::Full { transforms, .. } => transforms.len() / (d * d),
            WhitenField::Diagonal { scales, .. } => scales.len() / d,
            WhitenField::Isotropic { scales, .. } => scales.len(),
        }
    }

    /// `W v` at `cell`.
    pub fn apply(&self, cell: usize, v: &[f64]) -> Vec<f64> {
        let d = self.dim();
        match self {
            WhitenField::Full { transforms, .. } => {
                linalg::matvec(&transforms[cell * d * d..(cell + 1) * d * d], v)
            }
            WhitenField::Diagonal { scales, .. } => v
                .iter()
                .zip(&scales[cell * d..(cell + 1) * d])
                .map(|(x, s)| x * s)
                .collect(),
            WhitenField::Isotropic { scales, .. } => v.iter().map(|x| x * scales[cell]).collect(),
        }
    }

    /// Dense `W` at `cell`.
    pub fn dense(&self, cell: usize) -> Vec<f64> {
        let d = self.dim();
        match self {
            WhitenField::Full { transforms, .. } => {
                transforms[cell * d * d..(cell + 1) * d * d].to_vec()
            }
            _ => {
                let mut m = vec![0.0; d * d];
                let diag = self.apply(cell, &vec![1.0; d]);
                for k in 0..d {
                    m[k * d + k] = diag[k];
                }
                m
            }
        }
    }
}

/// Eigendecomposes each location's covariance `Σ = U D Uᵀ` (eigenvalues
/// clamped below at epsilon) and returns `W = D^(-1/2) Uᵀ`.
pub fn precompute_whitening(field: &GaussianField) -> Result<WhitenField> {
    let d = field.dim();
    let eps = field.epsilon();
    let inv_sqrt = |v: f64| 1.0 / v.max(eps).sqrt();
    Ok(match field.covariance() {
        Covariance::Full(cov) => {
            let blocks = cov
                .par_chunks(d * d)
                .enumerate()
                .map(|(cell, sigma)| {
                    let (values, ut) = linalg::symmetric_eigen(sigma, d)
                        .map_err(|e| Error::Numeric(format!("cell {cell}: {e}")))?;
                    let mut w = ut;
                    for (k, &lambda) in values.iter().enumerate() {
                        if !lambda.is_finite() {
                            return Err(Error::Numeric(format!(
                                "cell {cell}: non-finite eigenvalue"
                            )));
                        }
                        let s = inv_sqrt(lambda);
                        for x in &mut w[k * d..(k + 1) * d] {
                            *x *= s;
                        }
                    }
                    Ok(w)
                })
                .collect::<Result<Vec<Vec<f64>>>>()?;
            WhitenField::Full {
                dim: d,
                transforms: blocks.concat(),
            }
        }
        Covariance::Diagonal(v) => WhitenField::Diagonal {
            dim: d,
            scales: v.iter().map(|&s| inv_sqrt(s)).collect(),
        },
        Covariance::Isotropic(v) => WhitenField::Isotropic {
            dim: d,
            scales: v.iter().map(|&s| inv_sqrt(s)).collect(),
        },
    })
}

/// `max |W Σ Wᵀ − I|` at one location.
pub fn whitening_residual(w: &[f64], sigma: &[f64], d: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for p in 0..d {
        for q in 0..d {
            let v = linalg::bilinear(&w[p * d..(p + 1) * d], sigma, &w[q * d..(q + 1) * d]);
            let target = if p == q { 1.0 } else { 0.0 };
            worst = worst.max((v - target).abs());
        }
    }
    worst
}
