use std::collections::HashSet;

use futures::stream::{self, StreamExt};

use super::{
    AnnotationContext, AnnotationError, AnnotationRecord, BatchConfig, Checkpoint, ChosenResponse, CotAnswer,
    JudgeVerdict, MismatchRecord, Resolution, COT_STAGE, JUDGE_STAGE,
};
use crate::gateway::Gateway;
use crate::prompting::{assemble, parse_label, ParsedLabel, PromptMode};

/// Maps the judge's label onto the response that gave it. When both
/// responses carry the same label, Response 1 is credited.
pub fn chosen_response(verdict: &ParsedLabel, r1: &ParsedLabel, r2: &ParsedLabel) -> ChosenResponse {
    match verdict.label.as_deref() {
        None => ChosenResponse::Neither,
        Some(v) if r1.label.as_deref() == Some(v) => ChosenResponse::R1,
        Some(v) if r2.label.as_deref() == Some(v) => ChosenResponse::R2,
        Some(_) => ChosenResponse::Neither,
    }
}

async fn resolve_one(
    ctx: &AnnotationContext<'_>,
    a: &Gateway,
    b: &Gateway,
    judge: &Gateway,
    annotation: &AnnotationRecord,
) -> Result<MismatchRecord, AnnotationError> {
    let shots = ctx.shots_from_ids(&annotation.shots_used)?;
    let query = ctx.query_text(&annotation.record_id)?;
    let schema = ctx.corpus.schema();

    let cot = assemble(ctx.enhanced, &shots, query, &PromptMode::Cot)?;
    let (ra, rb) = futures::join!(a.complete(&cot, COT_STAGE), b.complete(&cot, COT_STAGE));
    let (ra, rb) = (ra?, rb?);
    let cot_a = CotAnswer {
        parsed: parse_label(&ra.text, schema),
        reasoning: ra.text,
    };
    let cot_b = CotAnswer {
        parsed: parse_label(&rb.text, schema),
        reasoning: rb.text,
    };

    let judge_req = assemble(
        ctx.enhanced,
        &shots,
        query,
        &PromptMode::Judge {
            response_1: cot_a.reasoning.clone(),
            response_2: cot_b.reasoning.clone(),
        },
    )?;
    let rj = judge.complete(&judge_req, JUDGE_STAGE).await?;
    let verdict = parse_label(&rj.text, schema);
    let chosen = chosen_response(&verdict, &cot_a.parsed, &cot_b.parsed);
    let (final_label, resolution) = match chosen {
        ChosenResponse::Neither => (None, Resolution::PendingHuman),
        _ => (verdict.label.clone(), Resolution::Judge),
    };
    Ok(MismatchRecord {
        record_id: annotation.record_id.clone(),
        cot_a,
        cot_b,
        judge: JudgeVerdict {
            reasoning: rj.text,
            verdict,
            chosen_response: chosen,
        },
        final_label,
        resolution,
        override_actor: None,
    })
}

/// Runs chain-of-thought on both annotators and then the judge, for the
/// disagreeing records only. Each record reuses the shots from its coarse
/// pass. Checkpointing and resumption work as in
/// [`super::coarse_annotate`].
pub async fn consensus_resolve(
    ctx: &AnnotationContext<'_>,
    annotations: &[AnnotationRecord],
    a: &Gateway,
    b: &Gateway,
    judge: &Gateway,
    batch: &BatchConfig,
    mut done: Vec<MismatchRecord>,
    checkpoint: Checkpoint<'_, MismatchRecord>,
) -> Result<Vec<MismatchRecord>, AnnotationError> {
    if !ctx.enhanced.approved {
        return Err(crate::prompting::PromptError::NotApproved.into());
    }
    let seen: HashSet<String> = done.iter().map(|r| r.record_id.clone()).collect();
    let todo: Vec<&AnnotationRecord> = annotations
        .iter()
        .filter(|r| !r.agreed && !seen.contains(&r.record_id))
        .collect();
    let order = |id: &str| annotations.iter().position(|r| r.record_id == id).unwrap_or(usize::MAX);

    for chunk in todo.chunks(batch.batch_size.max(1)) {
        let results: Vec<Result<MismatchRecord, AnnotationError>> = stream::iter(chunk.iter().copied())
            .map(|rec| resolve_one(ctx, a, b, judge, rec))
            .buffered(batch.concurrency.max(1))
            .collect()
            .await;
        let mut first_err = None;
        for r in results {
            match r {
                Ok(m) => done.push(m),
                Err(e) if first_err.is_none() => first_err = Some(e),
                Err(_) => {}
            }
        }
        done.sort_by_key(|m| order(&m.record_id));
        checkpoint(&done)?;
        if let Some(e) = first_err {
            return Err(e);
        }
    }
    done.sort_by_key(|m| order(&m.record_id));
    Ok(done)
}
