//! Exemplar pool: one representative record per k-means cluster, plus the
//! human labeling lifecycle around it.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, kmeans_best_of, GeometryError, DEFAULT_MAX_ITERS};
use crate::matrix::EmbeddingMatrix;
use crate::store::{Corpus, LabelSchema};

/// Pools larger than this defeat the point of a small human-labeled set.
pub const POOL_SIZE_WARNING: usize = 100;

/// k-means restarts used for selection; seeds are `seed..seed + RESTARTS`.
pub const SELECTION_RESTARTS: u64 = 10;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("pool selection requires a reduced embedding matrix")]
    NotReduced,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("record `{0}` is not in the exemplar pool")]
    NotInPool(String),
    #[error("label `{0}` is not a schema class")]
    UnknownLabel(String),
    #[error("the pool has been verified and can no longer be edited")]
    PoolSealed,
    #[error("{missing} pool items are still unlabeled")]
    NotFullyLabeled { missing: usize },
    #[error("pool version is {found}, edit was based on {expected}")]
    VersionConflict { expected: u64, found: u64 },
    #[error("matrix does not match the one the pool was selected from")]
    MatrixMismatch,
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolStatus {
    Selecting,
    AwaitingLabels,
    Labeled,
    Verified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEdit {
    pub record_id: String,
    pub label: String,
    pub annotator: String,
    pub timestamp: DateTime<Utc>,
    /// Pool version after this edit.
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarPool {
    pub pool_ids: Vec<String>,
    pub m: usize,
    pub selection_seed: u64,
    pub model_name: String,
    pub labels: BTreeMap<String, String>,
    pub history: Vec<LabelEdit>,
    pub status: PoolStatus,
    /// Incremented by every edit; used for optimistic concurrency checks.
    pub version: u64,
    pub sealed_by: Option<String>,
    /// Cluster index of every matrix row, in matrix order.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

/// Runs k-means with k = `m` and keeps, for each cluster in index order,
/// the member nearest its centroid (ties go to the lower row index).
pub fn select_pool(matrix: &EmbeddingMatrix, m: usize, seed: u64) -> Result<ExemplarPool, PoolError> {
    if !matrix.reduced() {
        return Err(PoolError::NotReduced);
    }
    if m > POOL_SIZE_WARNING {
        tracing::warn!(m, "exemplar pool larger than {POOL_SIZE_WARNING} items");
    }
    let km = kmeans_best_of(matrix, m, seed..seed + SELECTION_RESTARTS, DEFAULT_MAX_ITERS)?;
    let mut pool_ids = Vec::with_capacity(m);
    for (c, centroid) in km.centroids.iter().enumerate() {
        let best = km
            .members(c)
            .map(|i| (geometry::squared_euclidean(matrix.row(i), centroid), i))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .expect("k-means leaves no cluster empty");
        pool_ids.push(matrix.record_ids()[best.1].clone());
    }
    Ok(ExemplarPool {
        pool_ids,
        m,
        selection_seed: seed,
        model_name: matrix.model_name().to_string(),
        labels: BTreeMap::new(),
        history: Vec::new(),
        status: PoolStatus::AwaitingLabels,
        version: 0,
        sealed_by: None,
        assignments: km.assignments,
        centroids: km.centroids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCoverage {
    pub cluster: usize,
    pub exemplar_id: String,
    pub population: usize,
    /// Largest distance from the centroid to a cluster member.
    pub radius: f64,
    /// Distance from the centroid to the chosen exemplar.
    pub exemplar_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub clusters: Vec<ClusterCoverage>,
    pub class_histogram: BTreeMap<String, usize>,
}

impl ExemplarPool {
    pub fn contains(&self, record_id: &str) -> bool {
        self.pool_ids.iter().any(|id| id == record_id)
    }

    pub fn label(&self, record_id: &str) -> Option<&str> {
        self.labels.get(record_id).map(String::as_str)
    }

    pub fn is_labeled(&self) -> bool {
        self.status >= PoolStatus::Labeled
    }

    pub fn unlabeled(&self) -> Vec<&str> {
        self.pool_ids
            .iter()
            .filter(|id| !self.labels.contains_key(*id))
            .map(String::as_str)
            .collect()
    }

    pub fn check_version(&self, expected: u64) -> Result<(), PoolError> {
        if expected != self.version {
            return Err(PoolError::VersionConflict {
                expected,
                found: self.version,
            });
        }
        Ok(())
    }

    pub fn record_label(
        &mut self,
        schema: &LabelSchema,
        record_id: &str,
        label: &str,
        annotator: &str,
    ) -> Result<(), PoolError> {
        self.record_label_at(schema, record_id, label, annotator, Utc::now())
    }

    pub fn record_label_at(
        &mut self,
        schema: &LabelSchema,
        record_id: &str,
        label: &str,
        annotator: &str,
        timestamp: DateTime<Utc>,
    ) -> Result<(), PoolError> {
        if self.status == PoolStatus::Verified {
            return Err(PoolError::PoolSealed);
        }
        if !self.contains(record_id) {
            return Err(PoolError::NotInPool(record_id.to_string()));
        }
        let canon = schema
            .resolve(label)
            .ok_or_else(|| PoolError::UnknownLabel(label.to_string()))?
            .to_string();
        self.version += 1;
        self.history.push(LabelEdit {
            record_id: record_id.to_string(),
            label: canon.clone(),
            annotator: annotator.to_string(),
            timestamp,
            version: self.version,
        });
        self.labels.insert(record_id.to_string(), canon);
        if self.labels.len() == self.pool_ids.len() {
            self.status = PoolStatus::Labeled;
        }
        Ok(())
    }

    /// Marks the pool verified. Requires every item to be labeled.
    pub fn seal(&mut self, actor: &str) -> Result<(), PoolError> {
        match self.status {
            PoolStatus::Verified => Err(PoolError::PoolSealed),
            PoolStatus::Labeled => {
                self.status = PoolStatus::Verified;
                self.sealed_by = Some(actor.to_string());
                self.version += 1;
                Ok(())
            }
            _ => Err(PoolError::NotFullyLabeled {
                missing: self.pool_ids.len() - self.labels.len(),
            }),
        }
    }

    pub fn coverage_report(&self, matrix: &EmbeddingMatrix) -> Result<CoverageReport, PoolError> {
        if matrix.len() != self.assignments.len() || matrix.dimension() != self.centroids.first().map_or(0, Vec::len) {
            return Err(PoolError::MatrixMismatch);
        }
        let mut clusters: Vec<ClusterCoverage> = self
            .pool_ids
            .iter()
            .enumerate()
            .map(|(c, id)| {
                let offset = matrix
                    .vector(id)
                    .map(|v| geometry::euclidean(v, &self.centroids[c]))
                    .map_err(|_| PoolError::MatrixMismatch)?;
                Ok(ClusterCoverage {
                    cluster: c,
                    exemplar_id: id.clone(),
                    population: 0,
                    radius: 0.0,
                    exemplar_offset: offset,
                })
            })
            .collect::<Result<_, PoolError>>()?;
        for (i, &c) in self.assignments.iter().enumerate() {
            let d = geometry::euclidean(matrix.row(i), &self.centroids[c]);
            let entry = &mut clusters[c];
            entry.population += 1;
            entry.radius = entry.radius.max(d);
        }
        let mut class_histogram = BTreeMap::new();
        for label in self.labels.values() {
            *class_histogram.entry(label.clone()).or_insert(0) += 1;
        }
        Ok(CoverageReport {
            clusters,
            class_histogram,
        })
    }

    /// CSV with columns `record_id,text,label`, in pool order.
    pub fn export_csv<W: Write>(&self, corpus: &Corpus, out: W) -> Result<(), PoolError> {
        let csv_err = |e: csv::Error| PoolError::Csv {
            line: 0,
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["record_id", "text", "label"]).map_err(csv_err)?;
        for id in &self.pool_ids {
            let text = corpus.get(id).map_or("", |r| r.text.as_str());
            w.write_record([id.as_str(), text, self.label(id).unwrap_or("")])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| PoolError::Csv {
            line: 0,
            message: e.to_string(),
        })
    }

    /// Applies every non-blank label in a `record_id,text,label` CSV through
    /// [`ExemplarPool::record_label`]. Returns the number of labels applied.
    pub fn import_csv<R: Read>(&mut self, schema: &LabelSchema, input: R, annotator: &str) -> Result<usize, PoolError> {
        let mut reader = csv::Reader::from_reader(input);
        let headers = reader
            .headers()
            .map_err(|e| PoolError::Csv {
                line: 1,
                message: e.to_string(),
            })?
            .clone();
        let col = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
        let (Some(id_col), Some(label_col)) = (col("record_id"), col("label")) else {
            return Err(PoolError::Csv {
                line: 1,
                message: "expected record_id and label columns".into(),
            });
        };
        let mut applied = 0;
        for row in reader.records() {
            let row = row.map_err(|e| PoolError::Csv {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let label = row.get(label_col).unwrap_or("").trim();
            if label.is_empty() {
                continue;
            }
            self.record_label(schema, row.get(id_col).unwrap_or(""), label, annotator)?;
            applied += 1;
        }
        Ok(applied)
    }
}
