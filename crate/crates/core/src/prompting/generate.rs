//! Rule generation: one rationale per labeled exemplar, then one summary
//! per class.

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use super::{ClassRule, PromptError, PromptTemplate};
use crate::gateway::{ChatRequest, Gateway};
use crate::pool::ExemplarPool;
use crate::store::Corpus;

pub const MAP_STAGE: &str = "prompt_map";
pub const REDUCE_STAGE: &str = "prompt_reduce";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rationale {
    pub record_id: String,
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleDraft {
    /// One entry per class in schema order; empty text when no rule came back.
    pub rules: Vec<ClassRule>,
    pub empty_classes: Vec<String>,
}

pub fn rationale_request(template: &PromptTemplate, text: &str, label: &str) -> ChatRequest {
    let user = format!(
        "### Rationale request\n{}\n\nText: {}\nHuman label: {}\n\n\
         Explain in one or two sentences which features of the text justify the human label. \
         Phrase the explanation so it could guide the labeling of similar texts.",
        template.initial_description.trim(),
        text.trim(),
        label,
    );
    ChatRequest {
        max_output_tokens: 200,
        ..ChatRequest::new("", user)
    }
}

pub fn rule_request(template: &PromptTemplate, class: &str, rationales: &[&Rationale]) -> ChatRequest {
    let mut user = format!(
        "### Rule summary\n{}\n\nClass: {}\nObservations from human-labeled examples of this class:\n",
        template.initial_description.trim(),
        class,
    );
    for (i, r) in rationales.iter().enumerate() {
        user.push_str(&format!("{}. {}\n", i + 1, r.text.trim().replace('\n', " ")));
    }
    user.push_str(&format!(
        "\nCombine these observations into a single labeling rule for this class. \
         Begin the rule with \"Choose {} when the text\". Reply with the rule only.",
        template.delimit(class)
    ));
    ChatRequest {
        max_output_tokens: 300,
        ..ChatRequest::new("", user)
    }
}

/// Extends `trace` with one rationale per pool item, in pool order.
///
/// `trace` is treated as a checkpoint: entries that already match the pool
/// prefix are kept and not re-requested. After every new rationale
/// `checkpoint` sees the whole trace so far; an error from it stops the
/// stage. On error the trace holds the
/// completed prefix and the call can be repeated to resume.
pub async fn map_rationales(
    pool: &ExemplarPool,
    corpus: &Corpus,
    template: &PromptTemplate,
    gateway: &Gateway,
    concurrency: usize,
    trace: &mut Vec<Rationale>,
    checkpoint: &mut (dyn FnMut(&[Rationale]) -> Result<(), PromptError> + Send),
) -> Result<(), PromptError> {
    if pool.pool_ids.is_empty() {
        return Err(PromptError::EmptyPool);
    }
    if !pool.is_labeled() {
        return Err(PromptError::PoolNotLabeled);
    }
    let keep = trace
        .iter()
        .zip(&pool.pool_ids)
        .take_while(|(r, id)| &r.record_id == *id && pool.label(id) == Some(r.label.as_str()))
        .count();
    trace.truncate(keep);

    let mut jobs = Vec::new();
    for id in &pool.pool_ids[keep..] {
        let label = pool.label(id).ok_or(PromptError::PoolNotLabeled)?.to_string();
        let text = corpus
            .get(id)
            .map(|r| r.text.clone())
            .ok_or(PromptError::EmptyPool)?;
        jobs.push((id.clone(), label, text));
    }
    let mut results = stream::iter(jobs)
        .map(|(id, label, text)| async move {
            let req = rationale_request(template, &text, &label);
            gateway.complete(&req, MAP_STAGE).await.map(|resp| Rationale {
                record_id: id,
                label,
                text: resp.text.trim().to_string(),
            })
        })
        .buffered(concurrency.max(1));
    while let Some(result) = results.next().await {
        trace.push(result?);
        checkpoint(trace)?;
    }
    Ok(())
}

/// One summary call per class that has rationales, serially in schema
/// order. Classes without rationales, or whose summary comes back blank,
/// are listed in `empty_classes` for a reviewer to fill in.
pub async fn reduce_rules(
    rationales: &[Rationale],
    template: &PromptTemplate,
    gateway: &Gateway,
) -> Result<RuleDraft, PromptError> {
    if rationales.is_empty() {
        return Err(PromptError::NoRationales);
    }
    let mut rules = Vec::with_capacity(template.class_names.len());
    let mut empty_classes = Vec::new();
    for class in &template.class_names {
        let mine: Vec<&Rationale> = rationales.iter().filter(|r| &r.label == class).collect();
        let text = if mine.is_empty() {
            String::new()
        } else {
            let req = rule_request(template, class, &mine);
            gateway.complete(&req, REDUCE_STAGE).await?.text.trim().to_string()
        };
        if text.is_empty() {
            empty_classes.push(class.clone());
        }
        rules.push(ClassRule {
            class: class.clone(),
            text,
        });
    }
    Ok(RuleDraft { rules, empty_classes })
}
