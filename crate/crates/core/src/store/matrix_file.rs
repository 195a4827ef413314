//! Embedding matrix files: a 16-byte magic, a little-endian `u64` header
//! length, a JSON header, then `rows × dimension` little-endian `f32`s.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::matrix::EmbeddingMatrix;

pub const MATRIX_MAGIC: &[u8; 16] = b"LKEMBEDMATRIX\0v1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model_name: String,
    reduced: bool,
    dimension: usize,
    rows: usize,
    record_ids: Vec<String>,
}

pub fn encode_matrix(matrix: &EmbeddingMatrix) -> Vec<u8> {
    let header = Header {
        model_name: matrix.model_name().to_string(),
        reduced: matrix.reduced(),
        dimension: matrix.dimension(),
        rows: matrix.len(),
        record_ids: matrix.record_ids().to_vec(),
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(24 + header.len() + matrix.as_flat().len() * 4);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for &v in matrix.as_flat() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<EmbeddingMatrix, StoreError> {
    let fail = |message: String| StoreError::MatrixFormat {
        path: path.display().to_string(),
        message,
    };
    if bytes.len() < 24 || &bytes[..16] != MATRIX_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let body_start = 24usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fail("header length exceeds file".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[24..body_start]).map_err(|e| fail(format!("header: {e}")))?;
    if header.record_ids.len() != header.rows {
        return Err(fail("row count does not match id list".into()));
    }
    let expected = header.rows * header.dimension * 4;
    let body = &bytes[body_start..];
    if body.len() != expected {
        return Err(fail(format!("expected {expected} data bytes, found {}", body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    EmbeddingMatrix::from_flat(
        header.record_ids,
        data,
        header.dimension,
        header.model_name,
        header.reduced,
    )
    .map_err(|e| fail(e.to_string()))
}

/// Writes atomically. Values outside `f32` range are rejected rather than
/// silently stored as infinities.
pub fn write_matrix(path: &Path, matrix: &EmbeddingMatrix) -> Result<(), StoreError> {
    if matrix.as_flat().iter().any(|&v| !(v as f32).is_finite()) {
        return Err(StoreError::MatrixFormat {
            path: path.display().to_string(),
            message: "value outside f32 range".into(),
        });
    }
    super::run_store::write_atomic(path, &encode_matrix(matrix))
}

pub fn read_matrix(path: &Path) -> Result<EmbeddingMatrix, StoreError> {
    let bytes = std::fs::read(path).map_err(|e| StoreError::io(path, e))?;
    decode_matrix(&bytes, path)
}
