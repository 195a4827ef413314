//! Numerical kernels: cosine distance, dimensionality reduction and k-means.
//!
//! Cosine distance is the similarity notion in the raw embedding space.
//! Once a matrix is reduced, clustering and pool selection use Euclidean
//! distance.

mod eigen;
mod kmeans;
mod pca;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::MatrixError;

pub use eigen::{symmetric_eigen, SymmetricEigen};
pub use kmeans::{kmeans, kmeans_best_of, KMeansResult, DEFAULT_MAX_ITERS};
pub use pca::{adopt_external, reduce, Reduction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("k = {k} exceeds the {rows} available rows")]
    KTooLarge { k: usize, rows: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("max_iters must be at least 1")]
    ZeroIterations,
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("matrix is already reduced")]
    AlreadyReduced,
    #[error("need at least {needed} rows to reduce, found {found}")]
    InsufficientRows { needed: usize, found: usize },
    #[error("target dimension {target} is invalid for input dimension {input}")]
    InvalidTarget { target: usize, input: usize },
    #[error("external reducer output does not match the input: {0}")]
    ExternalMismatch(String),
    #[error("the external reducer needs a pre-reduced matrix; use `adopt_external`")]
    ExternalRequired,
    #[error("eigensolver did not converge")]
    NoConvergence,
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReducerMethod {
    #[default]
    Pca,
    /// Pre-reduced matrix supplied by an outside tool (e.g. UMAP).
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducerSpec {
    #[serde(default)]
    pub method: ReducerMethod,
    pub target_dimension: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ReducerSpec {
    fn default() -> Self {
        Self {
            method: ReducerMethod::Pca,
            target_dimension: 24,
            seed: 0,
        }
    }
}

/// `1 - x·y / (|x| |y|)`, clamped to `[0, 2]`.
pub fn cosine_distance(x: &[f64], y: &[f64]) -> Result<f64, GeometryError> {
    Ok(1.0 - cosine_similarity(x, y)?)
}

pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64, GeometryError> {
    if x.len() != y.len() {
        return Err(GeometryError::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    let nx = norm(x);
    let ny = norm(y);
    if !nx.is_finite() || !ny.is_finite() {
        return Err(GeometryError::NonFinite);
    }
    if nx == 0.0 || ny == 0.0 {
        return Err(GeometryError::ZeroNorm);
    }
    Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn squared_euclidean(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn euclidean(x: &[f64], y: &[f64]) -> f64 {
    squared_euclidean(x, y).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_distance_reference_cases() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn cosine_distance_errors() {
        assert_eq!(
            cosine_distance(&[0.0, 0.0], &[1.0, 0.0]),
            Err(GeometryError::ZeroNorm)
        );
        assert_eq!(
            cosine_distance(&[1.0], &[1.0, 0.0]),
            Err(GeometryError::DimensionMismatch {
                expected: 1,
                found: 2
            })
        );
    }

    fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim).prop_filter("nonzero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            (x, y) in (1usize..8).prop_flat_map(|d| (nonzero_vec(d), nonzero_vec(d))),
            alpha in 0.01f64..100.0,
        ) {
            let d = cosine_distance(&x, &y).unwrap();
            prop_assert!((0.0..=2.0).contains(&d));
            prop_assert!((d - cosine_distance(&y, &x).unwrap()).abs() < 1e-12);
            let scaled: Vec<f64> = x.iter().map(|v| v * alpha).collect();
            prop_assert!((d - cosine_distance(&scaled, &y).unwrap()).abs() < 1e-9);
        }
    }
}
