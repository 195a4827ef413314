//! Two-annotator coarse labeling, consensus on disagreements, and the final
//! merge with human overrides.

mod coarse;
mod consensus;
mod finalize;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::GatewayError;
use crate::matrix::EmbeddingMatrix;
use crate::pool::ExemplarPool;
use crate::prompting::{EnhancedPrompt, ParsedLabel, PromptError};
use crate::retrieval::{MmrConfig, RetrievalError, Shot};
use crate::store::Corpus;

pub use coarse::coarse_annotate;
pub use consensus::{chosen_response, consensus_resolve};
pub use finalize::{apply_override, finalize, FinalLabel, FinalLabeling, FlaggedItem, Provenance};

pub const COARSE_STAGE: &str = "coarse";
pub const COT_STAGE: &str = "consensus_cot";
pub const JUDGE_STAGE: &str = "consensus_judge";

/// Records per checkpoint.
pub const DEFAULT_BATCH_SIZE: usize = 50;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("few-shot retrieval needs a labeled pool and an embedding matrix")]
    MissingPool,
    #[error("unknown record `{0}`")]
    UnknownRecord(String),
    #[error("mismatches without a resolution: {}", .0.join(", "))]
    UnresolvedMismatch(Vec<String>),
    #[error("records without annotations: {}", .0.join(", "))]
    MissingAnnotation(Vec<String>),
    #[error("override for `{0}` which is not in the mismatch set")]
    OverrideNotMismatch(String),
    #[error("label `{label}` for `{record}` is not a schema class")]
    UnknownLabel { record: String, label: String },
    #[error("interrupted: {0}")]
    Interrupted(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub record_id: String,
    pub label_a: ParsedLabel,
    pub label_b: ParsedLabel,
    /// Both parsed and equal.
    pub agreed: bool,
    pub provider_a: String,
    pub provider_b: String,
    pub shots_used: Vec<String>,
    pub prompt_hash: String,
    pub usage_a: CallUsage,
    pub usage_b: CallUsage,
}

impl AnnotationRecord {
    pub fn agreed_label(&self) -> Option<&str> {
        if self.agreed {
            self.label_a.label.as_deref()
        } else {
            None
        }
    }
}

pub(crate) fn labels_agree(a: &ParsedLabel, b: &ParsedLabel) -> bool {
    !a.is_failed() && !b.is_failed() && a.label == b.label
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotAnswer {
    pub reasoning: String,
    pub parsed: ParsedLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChosenResponse {
    R1,
    R2,
    Neither,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub reasoning: String,
    /// The label the judge named, if any. With `Neither` this is a proposal.
    pub verdict: ParsedLabel,
    pub chosen_response: ChosenResponse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Judge,
    /// The judge picked neither response or gave no parseable label.
    PendingHuman,
    HumanOverride,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MismatchRecord {
    pub record_id: String,
    pub cot_a: CotAnswer,
    pub cot_b: CotAnswer,
    pub judge: JudgeVerdict,
    /// Set when resolved by the judge or a human; `None` while pending.
    pub final_label: Option<String>,
    pub resolution: Resolution,
    pub override_actor: Option<String>,
}

/// Everything the annotators need besides the providers.
#[derive(Clone, Copy)]
pub struct AnnotationContext<'a> {
    pub corpus: &'a Corpus,
    pub enhanced: &'a EnhancedPrompt,
    /// Required when `mmr.k > 0`.
    pub pool: Option<&'a ExemplarPool>,
    pub matrix: Option<&'a EmbeddingMatrix>,
    pub mmr: &'a MmrConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub concurrency: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            concurrency: 8,
        }
    }
}

/// Called with every record completed so far after each batch. Returning
/// an error stops the stage after the checkpoint has been offered.
pub type Checkpoint<'a, T> = &'a mut (dyn FnMut(&[T]) -> Result<(), AnnotationError> + Send);

impl AnnotationContext<'_> {
    fn check(&self) -> Result<(), AnnotationError> {
        if !self.enhanced.approved {
            return Err(PromptError::NotApproved.into());
        }
        self.mmr.validate()?;
        if self.mmr.k > 0 && (self.pool.is_none() || self.matrix.is_none()) {
            return Err(AnnotationError::MissingPool);
        }
        Ok(())
    }

    pub fn shots_for(&self, record_id: &str) -> Result<Vec<Shot>, AnnotationError> {
        if self.mmr.k == 0 {
            return Ok(Vec::new());
        }
        let (Some(pool), Some(matrix)) = (self.pool, self.matrix) else {
            return Err(AnnotationError::MissingPool);
        };
        Ok(crate::retrieval::build_shot_set(record_id, self.corpus, pool, matrix, self.mmr)?)
    }

    /// Rebuilds shots from stored ids, in the stored order.
    pub fn shots_from_ids(&self, ids: &[String]) -> Result<Vec<Shot>, AnnotationError> {
        ids.iter()
            .map(|id| {
                let pool = self.pool.ok_or(AnnotationError::MissingPool)?;
                let label = pool.label(id).ok_or(AnnotationError::MissingPool)?;
                let rec = self
                    .corpus
                    .get(id)
                    .ok_or_else(|| AnnotationError::UnknownRecord(id.clone()))?;
                Ok(Shot {
                    record_id: id.clone(),
                    text: rec.text.clone(),
                    label: label.to_string(),
                })
            })
            .collect()
    }

    fn query_text(&self, record_id: &str) -> Result<&str, AnnotationError> {
        self.corpus
            .get(record_id)
            .map(|r| r.text.as_str())
            .ok_or_else(|| AnnotationError::UnknownRecord(record_id.to_string()))
    }
}
