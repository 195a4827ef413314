use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EnhancedPrompt, PromptError};
use crate::gateway::ChatRequest;
use crate::retrieval::Shot;

pub const COT_INSTRUCTION: &str =
    "Let's think step by step. Explain briefly how the labeling rules apply to the text, then state the final answer.";

pub const JUDGE_INSTRUCTION_HEAD: &str =
    "You are given 2 responses (\"Response 1\" and \"Response 2\") to the following task about the \"Text\", which can be correct or wrong.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PromptMode {
    Plain,
    Cot,
    Judge { response_1: String, response_2: String },
}

fn judge_instruction(open: &str, close: &str) -> String {
    format!(
        "{JUDGE_INSTRUCTION_HEAD}\nPlease judge which response (or neither) to the following content is correct \
         step by step and provide your reasoning succinctly (Do not exceed 100 words). Finally, based on the \
         reasoning, choose the correct answer and repeat the response's (or your) choice once in '{open}' and '{close}'."
    )
}

fn task_text(enhanced: &EnhancedPrompt, shots: &[Shot], query_text: &str, cot: bool) -> String {
    let mut out = enhanced.task_block();
    out.push('\n');
    for (i, shot) in shots.iter().enumerate() {
        out.push_str(&format!("Example {}:\nText: {}\nAnswer: {}\n\n", i + 1, shot.text.trim(), shot.label));
    }
    out.push_str("### Query\nText: ");
    out.push_str(query_text.trim());
    out.push_str("\n\n");
    if cot {
        out.push_str(COT_INSTRUCTION);
        out.push('\n');
    }
    out.push_str(enhanced.base.output_contract.trim());
    out
}

/// Builds the request for one query. Output is a pure function of the
/// inputs, so identical inputs give identical bytes.
pub fn assemble(
    enhanced: &EnhancedPrompt,
    shots: &[Shot],
    query_text: &str,
    mode: &PromptMode,
) -> Result<ChatRequest, PromptError> {
    if !enhanced.approved {
        return Err(PromptError::NotApproved);
    }
    let (user, max_tokens) = match mode {
        PromptMode::Plain => (task_text(enhanced, shots, query_text, false), 32),
        PromptMode::Cot => (task_text(enhanced, shots, query_text, true), 512),
        PromptMode::Judge { response_1, response_2 } => {
            if response_1.trim().is_empty() || response_2.trim().is_empty() {
                return Err(PromptError::MissingCandidates);
            }
            let base = &enhanced.base;
            let text = format!(
                "{}\n\n### Task\n{}\n\n### Response 1\n{}\n\n### Response 2\n{}\n",
                judge_instruction(&base.open_delimiter, &base.close_delimiter),
                task_text(enhanced, shots, query_text, false),
                response_1.trim(),
                response_2.trim(),
            );
            (text, 400)
        }
    };
    Ok(ChatRequest {
        max_output_tokens: max_tokens,
        ..ChatRequest::new("", user)
    })
}

/// SHA-256 over the system and user text of a request.
pub fn prompt_hash(request: &ChatRequest) -> String {
    let mut h = Sha256::new();
    h.update(request.system_text.as_bytes());
    h.update([0u8]);
    h.update(request.user_text.as_bytes());
    hex::encode(h.finalize())
}
