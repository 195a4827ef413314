//! Exemplar-pool size sweep.
//!
//! Each pool size gets its own sub-run under `<run_dir>/sweep/m<M>`. The
//! pool is labeled from the corpus reference labels and the prompt is
//! approved without edits, so the only thing that varies between cells is
//! the pool. Cells are scored on annotator A's coarse labels.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::runner::{evaluate, Orchestrator, RunError};
use crate::state::Stage;
use labelkit_core::metrics::{MetricsReport, UNPARSED};

pub const SWEEP_ACTOR: &str = "sweep";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub m: usize,
    pub metrics: Option<MetricsReport>,
    pub provider_calls: u64,
    /// Why the cell has no metrics.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
    /// Whether macro-F1 never decreases as M grows, over the cells that
    /// finished. Reported, not enforced.
    pub macro_f1_monotone: bool,
}

impl SweepTable {
    pub fn render(&self) -> String {
        let mut out = format!("{:>6}  {:>9}  {:>9}  {:>9}  {:>8}\n", "M", "macro-F1", "accuracy", "calls", "status");
        for c in &self.cells {
            match (&c.metrics, &c.error) {
                (Some(m), _) => out.push_str(&format!(
                    "{:>6}  {:>8.2}%  {:>8.2}%  {:>9}  {:>8}\n",
                    c.m,
                    m.macro_f1 * 100.0,
                    m.accuracy * 100.0,
                    c.provider_calls,
                    "ok"
                )),
                (None, err) => out.push_str(&format!(
                    "{:>6}  {:>9}  {:>9}  {:>9}  failed: {}\n",
                    c.m,
                    "-",
                    "-",
                    c.provider_calls,
                    err.as_deref().unwrap_or("no reference labels")
                )),
            }
        }
        out.push_str(&format!(
            "macro-F1 non-decreasing in M: {}\n",
            if self.macro_f1_monotone { "yes" } else { "no" }
        ));
        out
    }
}

async fn run_cell(base: &RunConfig, m: usize) -> Result<(MetricsReport, u64), (RunError, u64)> {
    let mut cfg = base.clone();
    cfg.pool.m = m;
    cfg.run_dir = base.run_dir.join("sweep").join(format!("m{m}"));
    let mut orch = Orchestrator::open(cfg).map_err(|e| (e, 0))?;
    let calls = |o: &Orchestrator| o.session_ledger().totals().calls;
    let result: Result<MetricsReport, RunError> = async {
        let state = orch.run_stage(Stage::PoolSelected).await?;
        if !state.reached(Stage::PoolLabeled) {
            orch.label_pool_from_reference(SWEEP_ACTOR)?;
        }
        let state = orch.run_stage(Stage::PromptGenerated).await?;
        if !state.reached(Stage::PromptApproved) {
            orch.approve_prompt(SWEEP_ACTOR, None)?;
        }
        orch.run_stage(Stage::CoarseDone).await?;
        let corpus = orch
            .store()
            .load_corpus()?
            .ok_or_else(|| RunError::NotFound("corpus missing".into()))?;
        let pred = orch
            .annotations()?
            .into_iter()
            .map(|a| (a.record_id, a.label_a.label.unwrap_or_else(|| UNPARSED.to_string())))
            .collect();
        evaluate(&corpus, &pred).ok_or_else(|| RunError::Invalid("the corpus has no reference labels".into()))
    }
    .await;
    let n = calls(&orch);
    result.map(|m| (m, n)).map_err(|e| (e, n))
}

/// Runs one cell per pool size. A failing cell is recorded and the sweep
/// moves on, so the table is always returned.
pub async fn sweep_exemplars(base: &RunConfig, m_values: &[usize]) -> SweepTable {
    let mut sizes = m_values.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let mut cells = Vec::with_capacity(sizes.len());
    for m in sizes {
        tracing::info!(m, "sweep cell");
        let cell = match run_cell(base, m).await {
            Ok((metrics, calls)) => SweepCell {
                m,
                metrics: Some(metrics),
                provider_calls: calls,
                error: None,
            },
            Err((e, calls)) => SweepCell {
                m,
                metrics: None,
                provider_calls: calls,
                error: Some(e.to_string()),
            },
        };
        cells.push(cell);
    }
    let f1s: Vec<f64> = cells.iter().filter_map(|c| c.metrics.as_ref().map(|m| m.macro_f1)).collect();
    SweepTable {
        macro_f1_monotone: f1s.windows(2).all(|w| w[1] >= w[0] - 1e-12),
        cells,
    }
}
