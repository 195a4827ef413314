//! Row-per-record dense embedding matrix with provenance.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatrixError {
    #[error("matrix has {ids} record ids but {rows} rows")]
    RowCount { ids: usize, rows: usize },
    #[error("row {row} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("matrix must have a positive dimension")]
    EmptyDimension,
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("duplicate record id `{0}` in matrix")]
    DuplicateId(String),
    #[error("record `{0}` not present in matrix")]
    UnknownRecord(String),
}

/// Dense embeddings, one row per record, stored row-major in `f64`.
///
/// Persisted matrices are float32 on disk; [`EmbeddingMatrix::quantized`]
/// produces the exact in-memory image of what the store writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct EmbeddingMatrix {
    record_ids: Vec<String>,
    data: Vec<f64>,
    dimension: usize,
    model_name: String,
    reduced: bool,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    record_ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    model_name: String,
    reduced: bool,
}

impl TryFrom<RawMatrix> for EmbeddingMatrix {
    type Error = MatrixError;
    fn try_from(raw: RawMatrix) -> Result<Self, Self::Error> {
        EmbeddingMatrix::new(raw.record_ids, raw.vectors, raw.model_name, raw.reduced)
    }
}

impl From<EmbeddingMatrix> for RawMatrix {
    fn from(m: EmbeddingMatrix) -> Self {
        RawMatrix {
            vectors: m.rows().map(<[f64]>::to_vec).collect(),
            record_ids: m.record_ids,
            model_name: m.model_name,
            reduced: m.reduced,
        }
    }
}

impl EmbeddingMatrix {
    pub fn new(
        record_ids: Vec<String>,
        rows: Vec<Vec<f64>>,
        model_name: impl Into<String>,
        reduced: bool,
    ) -> Result<Self, MatrixError> {
        if record_ids.len() != rows.len() {
            return Err(MatrixError::RowCount {
                ids: record_ids.len(),
                rows: rows.len(),
            });
        }
        let dimension = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dimension);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != dimension {
                return Err(MatrixError::DimensionMismatch {
                    row: r,
                    expected: dimension,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_flat(record_ids, data, dimension, model_name, reduced)
    }

    pub fn from_flat(
        record_ids: Vec<String>,
        data: Vec<f64>,
        dimension: usize,
        model_name: impl Into<String>,
        reduced: bool,
    ) -> Result<Self, MatrixError> {
        if dimension == 0 {
            return Err(MatrixError::EmptyDimension);
        }
        if data.len() != record_ids.len() * dimension {
            return Err(MatrixError::RowCount {
                ids: record_ids.len(),
                rows: data.len() / dimension,
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(MatrixError::NonFinite {
                row: pos / dimension,
                col: pos % dimension,
            });
        }
        let mut index = HashMap::with_capacity(record_ids.len());
        for (i, id) in record_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(MatrixError::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            record_ids,
            data,
            dimension,
            model_name: model_name.into(),
            reduced,
            index,
        })
    }

    pub fn record_ids(&self) -> &[String] {
        &self.record_ids
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn reduced(&self) -> bool {
        self.reduced
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.record_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dimension)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn index_of(&self, record_id: &str) -> Option<usize> {
        self.index.get(record_id).copied()
    }

    pub fn vector(&self, record_id: &str) -> Result<&[f64], MatrixError> {
        self.index_of(record_id)
            .map(|i| self.row(i))
            .ok_or_else(|| MatrixError::UnknownRecord(record_id.to_string()))
    }

    /// Copy with every entry rounded through `f32`.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| v as f32 as f64).collect();
        Self {
            data,
            ..self.clone()
        }
    }

    /// Same rows, new provenance. Used by reducers that emit a new space.
    pub(crate) fn with_data(
        &self,
        data: Vec<f64>,
        dimension: usize,
        model_name: String,
        reduced: bool,
    ) -> Result<Self, MatrixError> {
        Self::from_flat(self.record_ids.clone(), data, dimension, model_name, reduced)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_ragged_rows() {
        let err = EmbeddingMatrix::new(
            vec!["a".into(), "b".into()],
            vec![vec![1.0, 2.0], vec![1.0]],
            "m",
            false,
        )
        .unwrap_err();
        assert!(matches!(err, MatrixError::DimensionMismatch { row: 1, .. }));
    }

    #[test]
    fn rejects_non_finite() {
        let err =
            EmbeddingMatrix::new(vec!["a".into()], vec![vec![1.0, f64::NAN]], "m", false).unwrap_err();
        assert_eq!(err, MatrixError::NonFinite { row: 0, col: 1 });
    }

    #[test]
    fn lookup_by_id() {
        let m = EmbeddingMatrix::new(
            vec!["a".into(), "b".into()],
            vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            "m",
            false,
        )
        .unwrap();
        assert_eq!(m.vector("b").unwrap(), &[3.0, 4.0]);
        assert!(m.vector("zz").is_err());
    }

    #[test]
    fn serde_round_trip() {
        let m = EmbeddingMatrix::new(vec!["a".into()], vec![vec![0.5, -1.0]], "m", true).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: EmbeddingMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(m, back);
    }
}
