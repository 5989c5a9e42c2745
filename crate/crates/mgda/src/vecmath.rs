//! Dense real-vector primitives: inner products, norms, projections,
//! angles, Gram matrices. Everything downstream (gradient combination,
//! stationarity checks) is built on these.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VecError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("degenerate projection axis (zero vector)")]
    ZeroAxis,
    #[error("angle undefined for zero vector")]
    ZeroAngle,
    #[error("empty vector set")]
    Empty,
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<(), VecError> {
    if a.len() != b.len() {
        return Err(VecError::DimMismatch(a.len(), b.len()));
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn scale(a: &[f64], c: f64) -> Vec<f64> {
    a.iter().map(|x| c * x).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// In-place `a += c * b`.
pub fn axpy(a: &mut [f64], c: f64, b: &[f64]) {
    debug_assert_eq!(a.len(), b.len());
    for (x, y) in a.iter_mut().zip(b) {
        *x += c * y;
    }
}

/// Projection of `v` onto the axis spanned by `a`: (⟨v,a⟩/‖a‖²)·a.
pub fn project_onto(v: &[f64], a: &[f64]) -> Result<Vec<f64>, VecError> {
    check_dims(v, a)?;
    let aa = dot(a, a);
    if aa == 0.0 {
        return Err(VecError::ZeroAxis);
    }
    Ok(scale(a, dot(v, a) / aa))
}

/// Component of `v` orthogonal to `a`: v − proj_a(v).
pub fn project_onto_complement(v: &[f64], a: &[f64]) -> Result<Vec<f64>, VecError> {
    let p = project_onto(v, a)?;
    Ok(sub(v, &p))
}

/// Angle between two nonzero vectors, in [0, π]. The cosine is clamped
/// to [−1, 1] before arccos so rounding never produces NaN.
pub fn angle_between(u: &[f64], v: &[f64]) -> Result<f64, VecError> {
    check_dims(u, v)?;
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(VecError::ZeroAngle);
    }
    let cos = (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0);
    Ok(cos.acos())
}

/// Gram matrix M with M[i][j] = ⟨g_i, g_j⟩.
pub fn gram_matrix(gradients: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, VecError> {
    if gradients.is_empty() {
        return Err(VecError::Empty);
    }
    let d = gradients[0].len();
    for g in gradients {
        if g.len() != d {
            return Err(VecError::DimMismatch(d, g.len()));
        }
    }
    let n = gradients.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = dot(&gradients[i], &gradients[j]);
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok(m)
}
