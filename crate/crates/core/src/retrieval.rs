//! Per-query few-shot selection by maximal marginal relevance.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, GeometryError};
use crate::matrix::EmbeddingMatrix;
use crate::pool::ExemplarPool;
use crate::store::Corpus;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("lambda must lie in [0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("requested {k} shots from {available} candidates")]
    KTooLarge { k: usize, available: usize },
    #[error("class-constrained retrieval needs a labeled pool")]
    UnlabeledPool,
    #[error("query has dimension {found}, matrix has {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("record `{0}` has no embedding")]
    UnknownRecord(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
    NegEuclidean,
}

impl Similarity {
    pub fn score(self, a: &[f64], b: &[f64]) -> Result<f64, GeometryError> {
        match self {
            Similarity::Cosine => geometry::cosine_similarity(a, b),
            Similarity::Dot => Ok(geometry::dot(a, b)),
            Similarity::NegEuclidean => Ok(-geometry::euclidean(a, b)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MmrConfig {
    pub lambda: f64,
    pub k: usize,
    pub similarity: Similarity,
    pub class_constrained: bool,
}

impl Default for MmrConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            k: 4,
            similarity: Similarity::Cosine,
            class_constrained: false,
        }
    }
}

impl MmrConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(RetrievalError::InvalidLambda(self.lambda));
        }
        Ok(())
    }
}

/// One greedy step: the chosen record and the terms of its score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmrStep {
    pub record_id: String,
    pub score: f64,
    pub relevance: f64,
    /// Largest similarity to an already selected item (0 on the first step).
    pub redundancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shot {
    pub record_id: String,
    pub text: String,
    pub label: String,
}

struct Candidate<'a> {
    id: &'a str,
    row: usize,
    label: Option<&'a str>,
}

/// Greedy MMR over the pool, returning each step's scores.
///
/// Candidates are visited in matrix row order and only a strictly larger
/// score replaces the incumbent, so ties go to the lower row.
pub fn mmr_trace(
    query: &[f64],
    pool: &ExemplarPool,
    matrix: &EmbeddingMatrix,
    config: &MmrConfig,
    exclude: Option<&str>,
) -> Result<Vec<MmrStep>, RetrievalError> {
    config.validate()?;
    if query.len() != matrix.dimension() {
        return Err(RetrievalError::DimensionMismatch {
            expected: matrix.dimension(),
            found: query.len(),
        });
    }
    let mut cands = Vec::with_capacity(pool.pool_ids.len());
    for id in &pool.pool_ids {
        if Some(id.as_str()) == exclude {
            continue;
        }
        let row = matrix
            .index_of(id)
            .ok_or_else(|| RetrievalError::UnknownRecord(id.clone()))?;
        cands.push(Candidate {
            id,
            row,
            label: pool.label(id),
        });
    }
    cands.sort_by_key(|c| c.row);
    if config.k > cands.len() {
        return Err(RetrievalError::KTooLarge {
            k: config.k,
            available: cands.len(),
        });
    }
    if config.class_constrained && cands.iter().any(|c| c.label.is_none()) {
        return Err(RetrievalError::UnlabeledPool);
    }
    if config.k == 0 {
        return Ok(Vec::new());
    }

    let n = cands.len();
    let relevance = cands
        .iter()
        .map(|c| config.similarity.score(query, matrix.row(c.row)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut pairwise = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s = config.similarity.score(matrix.row(cands[i].row), matrix.row(cands[j].row))?;
            pairwise[i * n + j] = s;
            pairwise[j * n + i] = s;
        }
    }

    let all_classes: HashSet<&str> = cands.iter().filter_map(|c| c.label).collect();
    let mut chosen: Vec<usize> = Vec::with_capacity(config.k);
    let mut taken = vec![false; n];
    let mut covered: HashSet<&str> = HashSet::new();
    // Largest similarity of each candidate to the selected set so far.
    let mut redundancy = vec![f64::NEG_INFINITY; n];
    let mut steps = Vec::with_capacity(config.k);

    for _ in 0..config.k {
        let constrain = config.class_constrained && covered.len() < all_classes.len();
        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..n {
            if taken[j] {
                continue;
            }
            if constrain && cands[j].label.is_some_and(|l| covered.contains(l)) {
                continue;
            }
            let red = if chosen.is_empty() { 0.0 } else { redundancy[j] };
            let score = config.lambda * relevance[j] - (1.0 - config.lambda) * red;
            if best.is_none_or(|(_, b, _)| score > b) {
                best = Some((j, score, red));
            }
        }
        let (j, score, red) = best.expect("k does not exceed candidate count");
        taken[j] = true;
        chosen.push(j);
        if let Some(l) = cands[j].label {
            covered.insert(l);
        }
        for (i, r) in redundancy.iter_mut().enumerate() {
            *r = r.max(pairwise[i * n + j]);
        }
        steps.push(MmrStep {
            record_id: cands[j].id.to_string(),
            score,
            relevance: relevance[j],
            redundancy: red,
        });
    }
    Ok(steps)
}

pub fn mmr_select(
    query: &[f64],
    pool: &ExemplarPool,
    matrix: &EmbeddingMatrix,
    config: &MmrConfig,
) -> Result<Vec<String>, RetrievalError> {
    Ok(mmr_trace(query, pool, matrix, config, None)?
        .into_iter()
        .map(|s| s.record_id)
        .collect())
}

/// Shots for one corpus record, excluding the record itself from the pool.
pub fn build_shot_set(
    query_id: &str,
    corpus: &Corpus,
    pool: &ExemplarPool,
    matrix: &EmbeddingMatrix,
    config: &MmrConfig,
) -> Result<Vec<Shot>, RetrievalError> {
    if config.k == 0 {
        return Ok(Vec::new());
    }
    let query = matrix
        .vector(query_id)
        .map_err(|_| RetrievalError::UnknownRecord(query_id.to_string()))?;
    let steps = mmr_trace(query, pool, matrix, config, Some(query_id))?;
    steps
        .into_iter()
        .map(|s| {
            let label = pool.label(&s.record_id).ok_or(RetrievalError::UnlabeledPool)?;
            let text = corpus
                .get(&s.record_id)
                .ok_or_else(|| RetrievalError::UnknownRecord(s.record_id.clone()))?
                .text
                .clone();
            Ok(Shot {
                label: label.to_string(),
                text,
                record_id: s.record_id,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::pool_of;
    use proptest::prelude::*;

    fn example() -> (EmbeddingMatrix, ExemplarPool) {
        let m = EmbeddingMatrix::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![1.0, 0.0], vec![0.8, 0.6], vec![0.0, 1.0]],
            "m",
            true,
        )
        .unwrap();
        (m, pool_of(&["a", "b", "c"], &[Some("pos"), Some("pos"), Some("neg")]))
    }

    #[test]
    fn worked_example() {
        let (m, pool) = example();
        let cfg = MmrConfig {
            lambda: 0.7,
            k: 2,
            ..Default::default()
        };
        let steps = mmr_trace(&[1.0, 0.0], &pool, &m, &cfg, None).unwrap();
        assert_eq!(steps[0].record_id, "a");
        assert_eq!(steps[1].record_id, "b");
        assert!((steps[1].score - 0.32).abs() < 1e-12);
    }

    #[test]
    fn class_constraint_forces_second_class() {
        let (m, pool) = example();
        let cfg = MmrConfig {
            lambda: 0.9,
            k: 2,
            class_constrained: true,
            ..Default::default()
        };
        assert_eq!(mmr_select(&[1.0, 0.0], &pool, &m, &cfg).unwrap(), vec!["a", "c"]);
        let unlabeled = pool_of(&["a", "b", "c"], &[Some("pos"), None, Some("neg")]);
        assert!(matches!(
            mmr_select(&[1.0, 0.0], &unlabeled, &m, &cfg),
            Err(RetrievalError::UnlabeledPool)
        ));
    }

    #[test]
    fn constraint_lifts_once_classes_covered() {
        let (m, pool) = example();
        let cfg = MmrConfig {
            lambda: 1.0,
            k: 3,
            class_constrained: true,
            ..Default::default()
        };
        assert_eq!(mmr_select(&[1.0, 0.0], &pool, &m, &cfg).unwrap(), vec!["a", "c", "b"]);
    }

    #[test]
    fn errors_and_zero_shot() {
        let (m, pool) = example();
        let mut cfg = MmrConfig {
            k: 4,
            ..Default::default()
        };
        assert!(matches!(
            mmr_select(&[1.0, 0.0], &pool, &m, &cfg),
            Err(RetrievalError::KTooLarge { k: 4, available: 3 })
        ));
        cfg.k = 0;
        assert!(mmr_select(&[1.0, 0.0], &pool, &m, &cfg).unwrap().is_empty());
        cfg.lambda = 1.5;
        assert!(matches!(
            mmr_select(&[1.0, 0.0], &pool, &m, &cfg),
            Err(RetrievalError::InvalidLambda(_))
        ));
        cfg.lambda = 0.5;
        assert!(mmr_select(&[1.0], &pool, &m, &cfg).is_err());
    }

    #[test]
    fn shot_set_excludes_query() {
        let (m, pool) = example();
        let schema = crate::store::LabelSchema::new("t", &["pos", "neg"]).unwrap();
        let corpus = Corpus::new(
            schema,
            ["a", "b", "c"]
                .iter()
                .map(|id| crate::store::TextRecord::new(*id, format!("text {id}")))
                .collect(),
        )
        .unwrap();
        let cfg = MmrConfig {
            k: 2,
            ..Default::default()
        };
        let shots = build_shot_set("a", &corpus, &pool, &m, &cfg).unwrap();
        assert_eq!(shots.len(), 2);
        assert!(shots.iter().all(|s| s.record_id != "a"));
        assert_eq!(shots[0].text, format!("text {}", shots[0].record_id));
        let cfg3 = MmrConfig { k: 3, ..cfg };
        assert!(matches!(
            build_shot_set("a", &corpus, &pool, &m, &cfg3),
            Err(RetrievalError::KTooLarge { .. })
        ));
    }

    proptest! {
        #[test]
        fn lambda_one_is_top_k(
            rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..10),
            q in prop::collection::vec(-3.0f64..3.0, 3),
            k_frac in 0.0f64..1.0,
        ) {
            let n = rows.len();
            let k = ((n as f64) * k_frac) as usize;
            let ids: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
            let idrefs: Vec<&str> = ids.iter().map(String::as_str).collect();
            let m = EmbeddingMatrix::new(ids.clone(), rows, "m", true).unwrap();
            let pool = pool_of(&idrefs, &vec![None; n]);
            let cfg = MmrConfig { lambda: 1.0, k, similarity: Similarity::Dot, class_constrained: false };
            let got = mmr_select(&q, &pool, &m, &cfg).unwrap();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| geometry::dot(&q, m.row(b)).total_cmp(&geometry::dot(&q, m.row(a))).then(a.cmp(&b)));
            let want: Vec<String> = order[..k].iter().map(|&i| ids[i].clone()).collect();
            prop_assert_eq!(got, want);
        }
    }
}
