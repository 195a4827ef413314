//! Stage execution over a run directory.
//!
//! Every stage persists its output before the run state advances, and the
//! long stages (rationales, coarse annotation, consensus) also persist after
//! each batch. Re-running a stage after an interruption picks up from the
//! last checkpoint without repeating completed provider calls.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use labelkit_core::annotation::{
    coarse_annotate, consensus_resolve, finalize, AnnotationContext, AnnotationError, AnnotationRecord, FinalLabeling,
    FlaggedItem, MismatchRecord, Provenance,
};
use labelkit_core::gateway::{Embedder, Gateway, Ledger, LedgerEntry, LedgerTotals, PriceSheet, ProviderConfig};
use labelkit_core::geometry::reduce;
use labelkit_core::metrics::{self, Labeling, MetricsReport, UNPARSED};
use labelkit_core::pool::{select_pool, ExemplarPool, PoolError, PoolStatus};
use labelkit_core::prompting::{map_rationales, reduce_rules, EnhancedPrompt, ParsedLabel, PromptError, PromptTemplate, Rationale};
use labelkit_core::store::{ingest, Corpus, ManifestInputs, Manifest, RunLock, RunStore, StoreError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::state::{RunState, Stage};

pub const STATE: &str = "state.json";
pub const LEDGER: &str = "ledger.jsonl";
pub const REDUCTION: &str = "reduction.json";
pub const POOL: &str = "pool.json";
pub const COVERAGE: &str = "pool_coverage.json";
pub const TRACE: &str = "prompt/trace.json";
pub const PROMPT: &str = "prompt/prompt.json";
pub const ANNOTATIONS: &str = "annotations.jsonl";
pub const MISMATCHES: &str = "mismatches.jsonl";
pub const OVERRIDES: &str = "overrides.json";
pub const FINAL_JSON: &str = "final_labels.json";
pub const FINAL_CSV: &str = "final_labels.csv";
pub const FLAGGED_CSV: &str = "flagged.csv";
pub const FLAGGED_JSON: &str = "flagged.json";
pub const REPORT: &str = "report.json";

/// Files whose hashes go into the run manifest.
const MANIFEST_ARTIFACTS: [&str; 9] = [
    "records.jsonl",
    POOL,
    PROMPT,
    ANNOTATIONS,
    MISMATCHES,
    OVERRIDES,
    FINAL_JSON,
    FINAL_CSV,
    FLAGGED_CSV,
];

#[derive(Debug, Error)]
pub enum RunError {
    #[error("waiting for a person before {stage}: {action}")]
    HumanGatePending { stage: Stage, action: String },
    #[error("{stage} failed: {message}")]
    StageFailed { stage: Stage, message: String },
    #[error("stopped after checkpoint {checkpoint} during {stage}")]
    Interrupted { stage: Stage, checkpoint: usize },
    #[error("another process holds the lock on this run directory")]
    LockHeld,
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for RunError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::LockHeld(_) => RunError::LockHeld,
            other => RunError::Store(other),
        }
    }
}

fn failed(stage: Stage, e: impl std::fmt::Display) -> RunError {
    RunError::StageFailed {
        stage,
        message: e.to_string(),
    }
}

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

/// Counts persisted checkpoints and, when asked to, stops the run right
/// after a given one. This is how tests simulate a killed process.
#[derive(Clone, Default)]
struct Checkpoints {
    count: Arc<AtomicUsize>,
    stop_after: Option<usize>,
}

impl Checkpoints {
    fn tick(&self) -> Result<(), usize> {
        let n = self.count.fetch_add(1, Ordering::SeqCst) + 1;
        if self.stop_after == Some(n) {
            Err(n)
        } else {
            Ok(())
        }
    }
}

/// Appends ledger entries not yet on disk to `ledger.jsonl`.
#[derive(Clone)]
struct LedgerSink {
    store: RunStore,
    ledger: Ledger,
    flushed: Arc<AtomicUsize>,
}

impl LedgerSink {
    fn flush(&self) -> Result<(), StoreError> {
        let entries = self.ledger.entries();
        let from = self.flushed.load(Ordering::SeqCst);
        if entries.len() <= from {
            return Ok(());
        }
        let path = self.store.path(LEDGER);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| StoreError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        let mut buf = String::new();
        for e in &entries[from..] {
            buf.push_str(&serde_json::to_string(e).expect("ledger entry serialises"));
            buf.push('\n');
        }
        f.write_all(buf.as_bytes())
            .and_then(|_| f.sync_all())
            .map_err(|e| StoreError::Io { path: path.display().to_string(), source: e })?;
        self.flushed.store(entries.len(), Ordering::SeqCst);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverrideEntry {
    pub label: String,
    pub actor: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolItem {
    pub record_id: String,
    pub text: String,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolView {
    pub status: PoolStatus,
    pub version: u64,
    pub labeled: usize,
    pub items: Vec<PoolItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchView {
    pub text: String,
    pub reference_label: Option<String>,
    #[serde(rename = "override")]
    pub override_entry: Option<OverrideEntry>,
    #[serde(flatten)]
    pub record: MismatchRecord,
}

/// A rule edit (with `class`) or an added correction (without).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEditRequest {
    #[serde(default)]
    pub class: Option<String>,
    pub text: String,
    #[serde(default)]
    pub expected_version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub records: usize,
    pub agreed: usize,
    pub mismatches: usize,
    pub provenance: BTreeMap<String, usize>,
    pub flagged: usize,
    pub agreement_rate: f64,
    /// Final labels against human or gold labels, where present.
    pub final_metrics: Option<MetricsReport>,
    pub annotator_a_metrics: Option<MetricsReport>,
    pub annotator_b_metrics: Option<MetricsReport>,
    pub ledger_by_stage: BTreeMap<String, LedgerTotals>,
    /// Priced models only; mock and embedding calls cost nothing here.
    pub estimated_cost_usd: f64,
}

impl RunReport {
    pub fn render(&self) -> String {
        let mut out = format!(
            "records {}  agreed {}  mismatches {}  flagged {}  agreement {:.2}%\n",
            self.records,
            self.agreed,
            self.mismatches,
            self.flagged,
            self.agreement_rate * 100.0
        );
        let prov: Vec<String> = self.provenance.iter().map(|(k, v)| format!("{k} {v}")).collect();
        out.push_str(&format!("provenance: {}\n", prov.join(", ")));
        for (title, m) in [
            ("final labels", &self.final_metrics),
            ("annotator A (coarse)", &self.annotator_a_metrics),
            ("annotator B (coarse)", &self.annotator_b_metrics),
        ] {
            if let Some(m) = m {
                out.push_str(&format!("\n{title}\n{}", m.render_table()));
            }
        }
        out.push_str("\nprovider calls by stage\n");
        for (stage, t) in &self.ledger_by_stage {
            out.push_str(&format!(
                "  {stage:<16} calls {:>6}  in {:>9}  out {:>8}\n",
                t.calls, t.input_tokens, t.output_tokens
            ));
        }
        out.push_str(&format!("estimated cost ${:.4}\n", self.estimated_cost_usd));
        out
    }
}

pub struct Orchestrator {
    config: RunConfig,
    store: RunStore,
    clock: Clock,
    checkpoints: Checkpoints,
    ledger: Ledger,
    sink: LedgerSink,
}

fn label_or_unparsed(p: &ParsedLabel) -> String {
    p.label.clone().unwrap_or_else(|| UNPARSED.to_string())
}

/// Metrics of `pred` on the records that have a reference label.
pub fn evaluate(corpus: &Corpus, pred: &BTreeMap<String, String>) -> Option<MetricsReport> {
    let gold: Labeling = corpus
        .records()
        .iter()
        .filter_map(|r| r.reference_label().map(|l| (r.record_id.clone(), l.to_string())))
        .filter(|(id, _)| pred.contains_key(id))
        .collect();
    if gold.is_empty() {
        return None;
    }
    let pred: Labeling = gold.keys().map(|id| (id.clone(), pred[id].clone())).collect();
    let table = metrics::confusion(&pred, &gold, &corpus.schema().classes).ok()?;
    metrics::prf1(&table).ok()
}

fn require_actor(actor: &str) -> Result<&str, RunError> {
    let a = actor.trim();
    if a.is_empty() {
        Err(RunError::Invalid("an actor identity is required".into()))
    } else {
        Ok(a)
    }
}

impl Orchestrator {
    pub fn open(config: RunConfig) -> Result<Self, RunError> {
        config.validate()?;
        let store = RunStore::open(&config.run_dir)?;
        let ledger = Ledger::default();
        let sink = LedgerSink {
            store: store.clone(),
            ledger: ledger.clone(),
            flushed: Arc::new(AtomicUsize::new(0)),
        };
        Ok(Self {
            config,
            store,
            clock: Arc::new(Utc::now),
            checkpoints: Checkpoints::default(),
            ledger,
            sink,
        })
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    /// Stops the run with [`RunError::Interrupted`] right after the `n`-th
    /// checkpoint has been persisted.
    pub fn stop_after_checkpoint(mut self, n: usize) -> Self {
        self.checkpoints.stop_after = Some(n);
        self
    }

    /// Checkpoints persisted by this instance.
    pub fn checkpoints_taken(&self) -> usize {
        self.checkpoints.count.load(Ordering::SeqCst)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn store(&self) -> &RunStore {
        &self.store
    }

    /// Calls made by this instance (not the persisted ledger).
    pub fn session_ledger(&self) -> &Ledger {
        &self.ledger
    }

    fn now(&self) -> DateTime<Utc> {
        (self.clock)()
    }

    fn lock(&self) -> Result<RunLock, RunError> {
        Ok(self.store.lock()?)
    }

    pub fn state(&self) -> Result<RunState, RunError> {
        Ok(self.store.read_json(STATE)?.unwrap_or_default())
    }

    fn save_state(&self, state: &RunState) -> Result<(), RunError> {
        Ok(self.store.write_json(STATE, state)?)
    }

    /// Every ledger entry persisted for this run.
    pub fn persisted_ledger(&self) -> Result<Vec<LedgerEntry>, RunError> {
        Ok(self.store.read_jsonl(LEDGER)?.unwrap_or_default())
    }

    fn persisted_totals(&self) -> Result<LedgerTotals, RunError> {
        let mut t = LedgerTotals::default();
        for e in self.persisted_ledger()? {
            t.add(e.input_tokens, e.output_tokens);
        }
        Ok(t)
    }

    fn corpus(&self) -> Result<Corpus, RunError> {
        self.store
            .load_corpus()?
            .ok_or_else(|| RunError::NotFound("no corpus has been ingested".into()))
    }

    pub fn pool(&self) -> Result<ExemplarPool, RunError> {
        self.store
            .read_json(POOL)?
            .ok_or_else(|| RunError::NotFound("no exemplar pool has been selected".into()))
    }

    pub fn prompt(&self) -> Result<EnhancedPrompt, RunError> {
        self.store
            .read_json(PROMPT)?
            .ok_or_else(|| RunError::NotFound("no prompt has been generated".into()))
    }

    pub fn annotations(&self) -> Result<Vec<AnnotationRecord>, RunError> {
        Ok(self.store.read_jsonl(ANNOTATIONS)?.unwrap_or_default())
    }

    fn mismatch_records(&self) -> Result<Vec<MismatchRecord>, RunError> {
        Ok(self.store.read_jsonl(MISMATCHES)?.unwrap_or_default())
    }

    pub fn overrides(&self) -> Result<BTreeMap<String, OverrideEntry>, RunError> {
        Ok(self.store.read_json(OVERRIDES)?.unwrap_or_default())
    }

    pub fn final_labeling(&self) -> Result<Option<FinalLabeling>, RunError> {
        Ok(self.store.read_json(FINAL_JSON)?)
    }

    pub fn flagged(&self) -> Result<Vec<FlaggedItem>, RunError> {
        Ok(self.store.read_json(FLAGGED_JSON)?.unwrap_or_default())
    }

    pub fn report(&self) -> Result<Option<RunReport>, RunError> {
        Ok(self.store.read_json(REPORT)?)
    }

    pub fn manifest(&self) -> Result<Option<Manifest>, RunError> {
        Ok(self.store.current_manifest()?)
    }

    /// The reduced matrix named in `reduction.json`.
    fn reduced_matrix(&self) -> Result<labelkit_core::matrix::EmbeddingMatrix, RunError> {
        let info: serde_json::Value = self
            .store
            .read_json(REDUCTION)?
            .ok_or_else(|| RunError::NotFound("embeddings have not been reduced".into()))?;
        let name = info["model_name"]
            .as_str()
            .ok_or_else(|| RunError::Invalid(format!("{REDUCTION} has no model_name")))?;
        Ok(self.store.load_embeddings(name, true, None)?)
    }

    fn gateway(&self, cfg: &ProviderConfig, stage: Stage) -> Result<Gateway, RunError> {
        Gateway::from_config(cfg, self.ledger.clone()).map_err(|e| failed(stage, e))
    }

    fn checkpoint_hooks(&self) -> (LedgerSink, Checkpoints) {
        (self.sink.clone(), self.checkpoints.clone())
    }

    fn interrupted(&self, stage: Stage) -> RunError {
        RunError::Interrupted {
            stage,
            checkpoint: self.checkpoints_taken(),
        }
    }

    /// Runs every missing stage up to and including `target`. Reaching a
    /// stage that needs a person returns [`RunError::HumanGatePending`];
    /// asking for a stage already reached changes nothing.
    pub async fn run_stage(&mut self, target: Stage) -> Result<RunState, RunError> {
        let _lock = self.lock()?;
        let mut state = self.state()?;
        while !state.reached(target) {
            let next = state.next().expect("target not reached implies a next stage");
            let actor = self.execute(next).await?;
            self.sink.flush()?;
            state.ledger = self.persisted_totals()?;
            state
                .advance(next, self.now(), actor.as_deref())
                .map_err(|e| RunError::Conflict(e.to_string()))?;
            self.save_state(&state)?;
            if self.checkpoints.tick().is_err() {
                return Err(self.interrupted(next));
            }
        }
        Ok(state)
    }

    async fn execute(&mut self, stage: Stage) -> Result<Option<String>, RunError> {
        tracing::info!(%stage, "running stage");
        match stage {
            Stage::Ingested => self.ingest().map(|_| None),
            Stage::Embedded => self.embed().await.map(|_| None),
            Stage::Reduced => self.reduce().map(|_| None),
            Stage::PoolSelected => self.select_pool().map(|_| None),
            Stage::PoolLabeled => {
                let pool = self.pool()?;
                if pool.status == PoolStatus::Verified {
                    Ok(pool.sealed_by.clone())
                } else {
                    Err(RunError::HumanGatePending {
                        stage,
                        action: format!(
                            "label the exemplar pool ({} of {} items still unlabeled) and seal it",
                            pool.unlabeled().len(),
                            pool.pool_ids.len()
                        ),
                    })
                }
            }
            Stage::PromptGenerated => self.generate_prompt().await.map(|_| None),
            Stage::PromptApproved => {
                let prompt = self.prompt()?;
                if prompt.approved {
                    Ok(prompt.approved_by.clone())
                } else {
                    let empty = prompt.empty_rules();
                    let mut action = "review and approve the generated prompt".to_string();
                    if !empty.is_empty() {
                        action.push_str(&format!(" (rules missing for: {})", empty.join(", ")));
                    }
                    Err(RunError::HumanGatePending { stage, action })
                }
            }
            Stage::CoarseDone => self.coarse().await.map(|_| None),
            Stage::ConsensusDone => self.consensus().await.map(|_| None),
            Stage::Finalized => self.finalize_stage(),
        }
    }

    fn ingest(&self) -> Result<(), RunError> {
        if self.store.load_corpus()?.is_some() {
            return Ok(());
        }
        let schema = self.config.schema()?;
        let corpus = ingest(&self.config.corpus_path, &schema).map_err(|e| failed(Stage::Ingested, e))?;
        self.store.save_corpus(&corpus)?;
        Ok(())
    }

    async fn embed(&self) -> Result<(), RunError> {
        let model = &self.config.providers.embedder.model_name;
        if self.store.embedding_version(model, false, None).is_ok() {
            return Ok(());
        }
        let corpus = self.corpus()?;
        let embedder =
            Embedder::from_config(&self.config.providers.embedder, self.ledger.clone()).map_err(|e| failed(Stage::Embedded, e))?;
        let matrix = embedder
            .embed_records(&corpus.ids(), &corpus.texts())
            .await
            .map_err(|e| failed(Stage::Embedded, e))?;
        self.store.attach_embeddings(&corpus, &matrix)?;
        Ok(())
    }

    fn reduce(&self) -> Result<(), RunError> {
        let model = &self.config.providers.embedder.model_name;
        let corpus = self.corpus()?;
        let raw = self.store.load_embeddings(model, false, None)?;
        let reduction = reduce(&raw, &self.config.reducer).map_err(|e| failed(Stage::Reduced, e))?;
        self.store.attach_embeddings(&corpus, &reduction.matrix)?;
        self.store.write_json(
            REDUCTION,
            &serde_json::json!({
                "model_name": reduction.matrix.model_name(),
                "target_dimension": self.config.reducer.target_dimension,
                "explained_variance": reduction.explained_variance,
                "rank_deficient": reduction.rank_deficient,
            }),
        )?;
        Ok(())
    }

    fn select_pool(&self) -> Result<(), RunError> {
        if self.store.exists(POOL) {
            return Ok(());
        }
        let reduced = self.reduced_matrix()?;
        let pool = select_pool(&reduced, self.config.pool.m, self.config.pool.seed)
            .map_err(|e| failed(Stage::PoolSelected, e))?;
        let coverage = pool.coverage_report(&reduced).map_err(|e| failed(Stage::PoolSelected, e))?;
        self.store.write_json(COVERAGE, &coverage)?;
        self.store.write_json(POOL, &pool)?;
        Ok(())
    }

    async fn generate_prompt(&self) -> Result<(), RunError> {
        const STAGE: Stage = Stage::PromptGenerated;
        if self.store.exists(PROMPT) {
            return Ok(());
        }
        let corpus = self.corpus()?;
        let pool = self.pool()?;
        let template = PromptTemplate::new(corpus.schema(), self.config.task.description.clone());
        let generator = self.gateway(self.config.generator(), STAGE)?;
        let mut trace: Vec<Rationale> = self.store.read_json(TRACE)?.unwrap_or_default();
        let (sink, checkpoints) = self.checkpoint_hooks();
        let store = self.store.clone();
        let mut checkpoint = move |t: &[Rationale]| -> Result<(), PromptError> {
            store
                .write_json(TRACE, t)
                .and_then(|_| sink.flush())
                .map_err(|e| PromptError::Interrupted(e.to_string()))?;
            checkpoints
                .tick()
                .map_err(|n| PromptError::Interrupted(format!("checkpoint {n}")))
        };
        let result = map_rationales(
            &pool,
            &corpus,
            &template,
            &generator,
            self.config.batch.concurrency,
            &mut trace,
            &mut checkpoint,
        )
        .await;
        match result {
            Ok(()) => {}
            Err(PromptError::Interrupted(_)) if self.checkpoints.stop_after == Some(self.checkpoints_taken()) => {
                return Err(self.interrupted(STAGE))
            }
            Err(e) => return Err(failed(STAGE, e)),
        }
        let draft = reduce_rules(&trace, &template, &generator)
            .await
            .map_err(|e| failed(STAGE, e))?;
        let prompt = EnhancedPrompt::new(template, draft.rules, trace);
        self.store.write_json(PROMPT, &prompt)?;
        Ok(())
    }

    fn annotation_error(&self, stage: Stage, e: AnnotationError) -> RunError {
        match e {
            AnnotationError::Interrupted(_) if self.checkpoints.stop_after == Some(self.checkpoints_taken()) => {
                self.interrupted(stage)
            }
            other => failed(stage, other),
        }
    }

    async fn coarse(&self) -> Result<(), RunError> {
        const STAGE: Stage = Stage::CoarseDone;
        let corpus = self.corpus()?;
        let pool = self.pool()?;
        let prompt = self.prompt()?;
        let matrix = self.reduced_matrix()?;
        let a = self.gateway(&self.config.providers.annotator_a, STAGE)?;
        let b = self.gateway(&self.config.providers.annotator_b, STAGE)?;
        let ctx = AnnotationContext {
            corpus: &corpus,
            enhanced: &prompt,
            pool: Some(&pool),
            matrix: Some(&matrix),
            mmr: &self.config.mmr,
        };
        let done = self.annotations()?;
        let (sink, checkpoints) = self.checkpoint_hooks();
        let store = self.store.clone();
        let mut checkpoint = move |recs: &[AnnotationRecord]| -> Result<(), AnnotationError> {
            store
                .write_jsonl(ANNOTATIONS, recs)
                .and_then(|_| sink.flush())
                .map_err(|e| AnnotationError::Interrupted(e.to_string()))?;
            checkpoints
                .tick()
                .map_err(|n| AnnotationError::Interrupted(format!("checkpoint {n}")))
        };
        let out = coarse_annotate(&ctx, &a, &b, &self.config.batch, done, &mut checkpoint)
            .await
            .map_err(|e| self.annotation_error(STAGE, e))?;
        self.store.write_jsonl(ANNOTATIONS, &out)?;
        Ok(())
    }

    async fn consensus(&self) -> Result<(), RunError> {
        const STAGE: Stage = Stage::ConsensusDone;
        let corpus = self.corpus()?;
        let pool = self.pool()?;
        let prompt = self.prompt()?;
        let matrix = self.reduced_matrix()?;
        let annotations = self.annotations()?;
        let a = self.gateway(&self.config.providers.annotator_a, STAGE)?;
        let b = self.gateway(&self.config.providers.annotator_b, STAGE)?;
        let judge = self.gateway(&self.config.providers.judge, STAGE)?;
        let ctx = AnnotationContext {
            corpus: &corpus,
            enhanced: &prompt,
            pool: Some(&pool),
            matrix: Some(&matrix),
            mmr: &self.config.mmr,
        };
        let done = self.mismatch_records()?;
        let (sink, checkpoints) = self.checkpoint_hooks();
        let store = self.store.clone();
        let mut checkpoint = move |recs: &[MismatchRecord]| -> Result<(), AnnotationError> {
            store
                .write_jsonl(MISMATCHES, recs)
                .and_then(|_| sink.flush())
                .map_err(|e| AnnotationError::Interrupted(e.to_string()))?;
            checkpoints
                .tick()
                .map_err(|n| AnnotationError::Interrupted(format!("checkpoint {n}")))
        };
        let out = consensus_resolve(&ctx, &annotations, &a, &b, &judge, &self.config.batch, done, &mut checkpoint)
            .await
            .map_err(|e| self.annotation_error(STAGE, e))?;
        self.store.write_jsonl(MISMATCHES, &out)?;
        Ok(())
    }

    fn finalize_stage(&self) -> Result<Option<String>, RunError> {
        const STAGE: Stage = Stage::Finalized;
        let corpus = self.corpus()?;
        let annotations = self.annotations()?;
        let mismatches = self.mismatch_records()?;
        let overrides = self.overrides()?;
        let labels: BTreeMap<String, String> = overrides.iter().map(|(k, v)| (k.clone(), v.label.clone())).collect();
        let (labeling, flagged) = match finalize(&corpus, &annotations, &mismatches, &labels) {
            Ok(x) => x,
            Err(AnnotationError::UnresolvedMismatch(ids)) => {
                return Err(RunError::HumanGatePending {
                    stage: STAGE,
                    action: format!(
                        "choose a final label for {} mismatches the judge left open: {}",
                        ids.len(),
                        ids.join(", ")
                    ),
                })
            }
            Err(e) => return Err(failed(STAGE, e)),
        };
        self.store.write_json(FINAL_JSON, &labeling)?;
        self.store.write_text(FINAL_CSV, &labeling.to_csv())?;
        self.store.write_json(FLAGGED_JSON, &flagged)?;
        self.store.write_text(FLAGGED_CSV, &FlaggedItem::to_csv(&flagged))?;

        // The report counts this instance's unflushed calls too.
        self.sink.flush()?;
        let report = self.build_report(&corpus, &annotations, &labeling, flagged.len())?;
        self.store.write_json(REPORT, &report)?;

        let pool = self.pool()?;
        self.store.snapshot(
            &corpus,
            &ManifestInputs {
                pool_ids: pool.pool_ids.clone(),
                config_hash: self.config.content_hash(),
                artifacts: MANIFEST_ARTIFACTS.iter().map(|s| s.to_string()).collect(),
            },
        )?;
        let actors: BTreeSet<&str> = overrides.values().map(|o| o.actor.as_str()).collect();
        Ok((!actors.is_empty()).then(|| actors.into_iter().collect::<Vec<_>>().join(",")))
    }

    fn build_report(
        &self,
        corpus: &Corpus,
        annotations: &[AnnotationRecord],
        labeling: &FinalLabeling,
        flagged: usize,
    ) -> Result<RunReport, RunError> {
        let agreed = annotations.iter().filter(|a| a.agreed).count();
        let final_pred: BTreeMap<String, String> =
            labeling.labels.iter().map(|l| (l.record_id.clone(), l.label.clone())).collect();
        let a_pred = annotations.iter().map(|a| (a.record_id.clone(), label_or_unparsed(&a.label_a))).collect();
        let b_pred = annotations.iter().map(|a| (a.record_id.clone(), label_or_unparsed(&a.label_b))).collect();
        let mut provenance = BTreeMap::new();
        for (name, p) in [
            ("agreement", Provenance::Agreement),
            ("consensus", Provenance::Consensus),
            ("human", Provenance::Human),
        ] {
            provenance.insert(name.to_string(), labeling.count(p));
        }
        let ledger = self.persisted_ledger()?;
        let mut ledger_by_stage: BTreeMap<String, LedgerTotals> = BTreeMap::new();
        let replay = Ledger::default();
        for e in ledger {
            ledger_by_stage
                .entry(e.stage.clone())
                .or_default()
                .add(e.input_tokens, e.output_tokens);
            replay.record(e);
        }
        Ok(RunReport {
            records: corpus.len(),
            agreed,
            mismatches: annotations.len() - agreed,
            provenance,
            flagged,
            agreement_rate: if annotations.is_empty() {
                0.0
            } else {
                agreed as f64 / annotations.len() as f64
            },
            final_metrics: evaluate(corpus, &final_pred),
            annotator_a_metrics: evaluate(corpus, &a_pred),
            annotator_b_metrics: evaluate(corpus, &b_pred),
            ledger_by_stage,
            estimated_cost_usd: replay.priced_cost(&PriceSheet::builtin()),
        })
    }

    // ---- human actions -------------------------------------------------

    fn require_stage(&self, stage: Stage, what: &str) -> Result<RunState, RunError> {
        let state = self.state()?;
        if state.stage != Some(stage) {
            return Err(RunError::Conflict(format!(
                "{what} is only possible at {stage}; the run is at {}",
                state.stage.map_or("the start".to_string(), |s| s.to_string())
            )));
        }
        Ok(state)
    }

    pub fn pool_view(&self) -> Result<PoolView, RunError> {
        let pool = self.pool()?;
        let corpus = self.corpus()?;
        let items = pool
            .pool_ids
            .iter()
            .map(|id| PoolItem {
                record_id: id.clone(),
                text: corpus.get(id).map(|r| r.text.clone()).unwrap_or_default(),
                label: pool.label(id).map(str::to_string),
            })
            .collect();
        Ok(PoolView {
            status: pool.status,
            version: pool.version,
            labeled: pool.labels.len(),
            items,
        })
    }

    fn pool_error(e: PoolError) -> RunError {
        match e {
            PoolError::NotInPool(id) => RunError::NotFound(format!("record `{id}` is not in the exemplar pool")),
            PoolError::UnknownLabel(l) => RunError::Invalid(format!("label `{l}` is not a schema class")),
            e @ (PoolError::VersionConflict { .. } | PoolError::PoolSealed | PoolError::NotFullyLabeled { .. }) => {
                RunError::Conflict(e.to_string())
            }
            e => RunError::Invalid(e.to_string()),
        }
    }

    pub fn label_pool_item(
        &self,
        record_id: &str,
        label: &str,
        actor: &str,
        expected_version: Option<u64>,
    ) -> Result<PoolView, RunError> {
        let actor = require_actor(actor)?;
        let _lock = self.lock()?;
        self.require_stage(Stage::PoolSelected, "labeling the pool")?;
        let corpus = self.corpus()?;
        let mut pool = self.pool()?;
        if let Some(v) = expected_version {
            pool.check_version(v).map_err(Self::pool_error)?;
        }
        pool.record_label_at(corpus.schema(), record_id, label, actor, self.now())
            .map_err(Self::pool_error)?;
        self.store.write_json(POOL, &pool)?;
        drop(_lock);
        self.pool_view()
    }

    pub fn import_labels(&self, csv: impl std::io::Read, actor: &str) -> Result<usize, RunError> {
        let actor = require_actor(actor)?;
        let _lock = self.lock()?;
        self.require_stage(Stage::PoolSelected, "importing pool labels")?;
        let corpus = self.corpus()?;
        let mut pool = self.pool()?;
        let n = pool
            .import_csv(corpus.schema(), csv, actor)
            .map_err(Self::pool_error)?;
        self.store.write_json(POOL, &pool)?;
        Ok(n)
    }

    pub fn export_pool(&self, out: impl std::io::Write) -> Result<(), RunError> {
        let corpus = self.corpus()?;
        self.pool()?.export_csv(&corpus, out).map_err(Self::pool_error)
    }

    /// Marks the pool verified and passes the labeling gate.
    pub fn seal_pool(&self, actor: &str) -> Result<RunState, RunError> {
        let actor = require_actor(actor)?;
        let _lock = self.lock()?;
        let mut state = self.require_stage(Stage::PoolSelected, "sealing the pool")?;
        let mut pool = self.pool()?;
        pool.seal(actor).map_err(Self::pool_error)?;
        self.store.write_json(POOL, &pool)?;
        state
            .advance(Stage::PoolLabeled, self.now(), Some(actor))
            .map_err(|e| RunError::Conflict(e.to_string()))?;
        self.save_state(&state)?;
        Ok(state)
    }

    /// Labels every pool item with its reference label and seals the pool.
    /// For evaluation runs where the pool labels come from an existing
    /// labeled set.
    pub fn label_pool_from_reference(&self, actor: &str) -> Result<RunState, RunError> {
        let actor = require_actor(actor)?;
        {
            let _lock = self.lock()?;
            self.require_stage(Stage::PoolSelected, "labeling the pool")?;
            let corpus = self.corpus()?;
            let mut pool = self.pool()?;
            for id in pool.pool_ids.clone() {
                let label = corpus
                    .get(&id)
                    .and_then(|r| r.reference_label())
                    .ok_or_else(|| RunError::Invalid(format!("pool item `{id}` has no reference label")))?
                    .to_string();
                pool.record_label_at(corpus.schema(), &id, &label, actor, self.now())
                    .map_err(Self::pool_error)?;
            }
            self.store.write_json(POOL, &pool)?;
        }
        self.seal_pool(actor)
    }

    pub fn edit_prompt(&self, edit: &PromptEditRequest, actor: &str) -> Result<EnhancedPrompt, RunError> {
        let actor = require_actor(actor)?;
        let _lock = self.lock()?;
        self.require_stage(Stage::PromptGenerated, "editing the prompt")?;
        let mut prompt = self.prompt()?;
        if let Some(v) = edit.expected_version {
            if v != prompt.version {
                return Err(RunError::Conflict(format!(
                    "prompt version is {}, edit was based on {v}",
                    prompt.version
                )));
            }
        }
        match &edit.class {
            Some(class) => prompt
                .edit_rule_at(class, &edit.text, actor, self.now())
                .map_err(|e| RunError::Invalid(e.to_string()))?,
            None => {
                if edit.text.trim().is_empty() {
                    return Err(RunError::Invalid("a correction needs text".into()));
                }
                prompt.add_correction_at(&edit.text, actor, self.now())
            }
        }
        self.store.write_json(PROMPT, &prompt)?;
        Ok(prompt)
    }

    /// Approves the prompt and passes the approval gate.
    pub fn approve_prompt(&self, actor: &str, expected_version: Option<u64>) -> Result<RunState, RunError> {
        let actor = require_actor(actor)?;
        let _lock = self.lock()?;
        let mut state = self.require_stage(Stage::PromptGenerated, "approving the prompt")?;
        let mut prompt = self.prompt()?;
        if let Some(v) = expected_version {
            if v != prompt.version {
                return Err(RunError::Conflict(format!(
                    "prompt version is {}, approval was based on {v}",
                    prompt.version
                )));
            }
        }
        prompt.approve(actor).map_err(|e| RunError::Invalid(e.to_string()))?;
        self.store.write_json(PROMPT, &prompt)?;
        state
            .advance(Stage::PromptApproved, self.now(), Some(actor))
            .map_err(|e| RunError::Conflict(e.to_string()))?;
        self.save_state(&state)?;
        Ok(state)
    }

    pub fn mismatches(&self) -> Result<Vec<MismatchView>, RunError> {
        let corpus = self.corpus()?;
        let overrides = self.overrides()?;
        Ok(self
            .mismatch_records()?
            .into_iter()
            .map(|m| {
                let rec = corpus.get(&m.record_id);
                MismatchView {
                    text: rec.map(|r| r.text.clone()).unwrap_or_default(),
                    reference_label: rec.and_then(|r| r.reference_label()).map(str::to_string),
                    override_entry: overrides.get(&m.record_id).cloned(),
                    record: m,
                }
            })
            .collect())
    }

    /// Records a person's final label for one mismatch.
    pub fn override_mismatch(&self, record_id: &str, label: &str, actor: &str) -> Result<OverrideEntry, RunError> {
        let actor = require_actor(actor)?;
        let _lock = self.lock()?;
        self.require_stage(Stage::ConsensusDone, "overriding a mismatch")?;
        if !self.mismatch_records()?.iter().any(|m| m.record_id == record_id) {
            return Err(RunError::NotFound(format!("record `{record_id}` is not in the mismatch set")));
        }
        let corpus = self.corpus()?;
        let canon = corpus
            .schema()
            .resolve(label)
            .ok_or_else(|| RunError::Invalid(format!("label `{label}` is not a schema class")))?;
        let entry = OverrideEntry {
            label: canon.to_string(),
            actor: actor.to_string(),
            at: self.now(),
        };
        let mut overrides = self.overrides()?;
        overrides.insert(record_id.to_string(), entry.clone());
        self.store.write_json(OVERRIDES, &overrides)?;
        Ok(entry)
    }

    /// Ids of mismatches with neither a judge resolution nor an override.
    pub fn open_mismatches(&self) -> Result<Vec<String>, RunError> {
        let overrides = self.overrides()?;
        Ok(self
            .mismatch_records()?
            .into_iter()
            .filter(|m| m.final_label.is_none() && !overrides.contains_key(&m.record_id))
            .map(|m| m.record_id)
            .collect())
    }
}
