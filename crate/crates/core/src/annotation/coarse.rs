use std::collections::HashSet;

use futures::stream::{self, StreamExt};

use super::{
    labels_agree, AnnotationContext, AnnotationError, AnnotationRecord, BatchConfig, CallUsage, Checkpoint,
    COARSE_STAGE,
};
use crate::gateway::Gateway;
use crate::prompting::{assemble, parse_label, prompt_hash, PromptMode};

async fn annotate_one(
    ctx: &AnnotationContext<'_>,
    a: &Gateway,
    b: &Gateway,
    record_id: &str,
) -> Result<AnnotationRecord, AnnotationError> {
    let shots = ctx.shots_for(record_id)?;
    let req = assemble(ctx.enhanced, &shots, ctx.query_text(record_id)?, &PromptMode::Plain)?;
    let (ra, rb) = futures::join!(a.complete(&req, COARSE_STAGE), b.complete(&req, COARSE_STAGE));
    let (ra, rb) = (ra?, rb?);
    let schema = ctx.corpus.schema();
    let label_a = parse_label(&ra.text, schema);
    let label_b = parse_label(&rb.text, schema);
    Ok(AnnotationRecord {
        record_id: record_id.to_string(),
        agreed: labels_agree(&label_a, &label_b),
        label_a,
        label_b,
        provider_a: a.provider_id().to_string(),
        provider_b: b.provider_id().to_string(),
        shots_used: shots.into_iter().map(|s| s.record_id).collect(),
        prompt_hash: prompt_hash(&req),
        usage_a: CallUsage {
            input_tokens: ra.input_tokens,
            output_tokens: ra.output_tokens,
        },
        usage_b: CallUsage {
            input_tokens: rb.input_tokens,
            output_tokens: rb.output_tokens,
        },
    })
}

/// Labels every corpus record with both annotators.
///
/// `done` holds records from an earlier, interrupted run; they are kept and
/// not re-requested. Work proceeds in corpus order, `batch.batch_size`
/// records at a time, and `checkpoint` sees all completed records after
/// each batch. If a call fails, the successful records of that batch are
/// still checkpointed before the error is returned. The result is in
/// corpus order.
pub async fn coarse_annotate(
    ctx: &AnnotationContext<'_>,
    a: &Gateway,
    b: &Gateway,
    batch: &BatchConfig,
    mut done: Vec<AnnotationRecord>,
    checkpoint: Checkpoint<'_, AnnotationRecord>,
) -> Result<Vec<AnnotationRecord>, AnnotationError> {
    ctx.check()?;
    let seen: HashSet<String> = done.iter().map(|r| r.record_id.clone()).collect();
    let todo: Vec<&str> = ctx
        .corpus
        .records()
        .iter()
        .map(|r| r.record_id.as_str())
        .filter(|id| !seen.contains(*id))
        .collect();

    for chunk in todo.chunks(batch.batch_size.max(1)) {
        let results: Vec<Result<AnnotationRecord, AnnotationError>> = stream::iter(chunk.iter().copied())
            .map(|id| annotate_one(ctx, a, b, id))
            .buffered(batch.concurrency.max(1))
            .collect()
            .await;
        let mut first_err = None;
        for r in results {
            match r {
                Ok(rec) => done.push(rec),
                Err(e) if first_err.is_none() => first_err = Some(e),
                Err(_) => {}
            }
        }
        sort_by_corpus(ctx, &mut done);
        checkpoint(&done)?;
        if let Some(e) = first_err {
            return Err(e);
        }
    }
    sort_by_corpus(ctx, &mut done);
    Ok(done)
}

fn sort_by_corpus(ctx: &AnnotationContext<'_>, records: &mut [AnnotationRecord]) {
    records.sort_by_key(|r| ctx.corpus.position(&r.record_id).unwrap_or(usize::MAX));
}
