use std::collections::BTreeMap;

use crate::pool::{ExemplarPool, PoolStatus};

/// A pool over `ids` with the given labels, bypassing selection.
pub fn pool_of(ids: &[&str], labels: &[Option<&str>]) -> ExemplarPool {
    let mut map = BTreeMap::new();
    for (id, l) in ids.iter().zip(labels) {
        if let Some(l) = l {
            map.insert(id.to_string(), l.to_string());
        }
    }
    ExemplarPool {
        pool_ids: ids.iter().map(|s| s.to_string()).collect(),
        m: ids.len(),
        selection_seed: 0,
        model_name: "m".into(),
        status: if map.len() == ids.len() {
            PoolStatus::Labeled
        } else {
            PoolStatus::AwaitingLabels
        },
        labels: map,
        history: Vec::new(),
        version: 0,
        sealed_by: None,
        assignments: Vec::new(),
        centroids: Vec::new(),
    }
}

