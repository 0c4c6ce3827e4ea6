//! Small dense kernels on row-major `d × d` slices.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), d * d);
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return Err(Error::Numeric(format!(
                        "matrix not positive definite at pivot {i} ({sum})"
                    )));
                }
                l[i * d + i] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive definite matrix via its Cholesky factor.
/// The result is exactly symmetric.
pub fn spd_inverse(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let l = cholesky(a, d)?;
    // L⁻¹ by forward substitution, column by column
    let mut linv = vec![0.0; d * d];
    for col in 0..d {
        for i in col..d {
            let mut sum = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                sum -= l[i * d + k] * linv[k * d + col];
            }
            linv[i * d + col] = sum / l[i * d + i];
        }
    }
    // A⁻¹ = L⁻ᵀ L⁻¹
    let mut inv = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = 0.0;
            for k in i.max(j)..d {
                sum += linv[k * d + i] * linv[k * d + j];
            }
            inv[i * d + j] = sum;
            inv[j * d + i] = sum;
        }
    }
    Ok(inv)
}

/// `aᵀ M b`.
pub fn bilinear(a: &[f64], m: &[f64], b: &[f64]) -> f64 {
    let d = a.len();
    let mut total = 0.0;
    for i in 0..d {
        let row = &m[i * d..(i + 1) * d];
        let mb: f64 = row.iter().zip(b).map(|(r, v)| r * v).sum();
        total += a[i] * mb;
    }
    total
}

/// `M v` for a row-major `rows × v.len()` matrix.
pub fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let cols = v.len();
    m.chunks_exact(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Symmetric eigendecomposition. Returns eigenvalues and the eigenvectors as
/// the rows of a row-major matrix (so the result is `Uᵀ`).
pub fn symmetric_eigen(a: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = DMatrix::from_row_slice(d, d, a);
    let eig = m
        .try_symmetric_eigen(1e-14, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigendecomposition did not converge".into()))?;
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let mut ut = vec![0.0; d * d];
    for k in 0..d {
        for i in 0..d {
            ut[k * d + i] = eig.eigenvectors[(i, k)];
        }
    }
    Ok((values, ut))
}

pub fn determinant(a: &[f64], d: usize) -> f64 {
    DMatrix::from_row_slice(d, d, a).determinant()
}
