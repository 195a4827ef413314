//! Task descriptions, rule generation, prompt assembly and label parsing.

mod assemble;
mod generate;
mod parse;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::GatewayError;
use crate::store::LabelSchema;

pub use assemble::{assemble, prompt_hash, PromptMode, COT_INSTRUCTION, JUDGE_INSTRUCTION_HEAD};
pub use generate::{map_rationales, rationale_request, reduce_rules, rule_request, Rationale, RuleDraft};
pub use parse::{delimited_tokens, parse_label, ParsePath, ParsedLabel};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("the enhanced prompt has not been approved")]
    NotApproved,
    #[error("judge prompts need two non-empty candidate responses")]
    MissingCandidates,
    #[error("the exemplar pool is empty")]
    EmptyPool,
    #[error("the exemplar pool is not fully labeled")]
    PoolNotLabeled,
    #[error("no rationales to summarise")]
    NoRationales,
    #[error("no rule text for classes: {}", .0.join(", "))]
    EmptyRule(Vec<String>),
    #[error("`{0}` is not a schema class")]
    UnknownClass(String),
    #[error("template does not match the label schema: {0}")]
    TemplateMismatch(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("interrupted: {0}")]
    Interrupted(String),
}

/// The human-written starting point: a short task description plus the
/// instruction that pins the output format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub task_name: String,
    pub initial_description: String,
    pub output_contract: String,
    pub class_names: Vec<String>,
    pub open_delimiter: String,
    pub close_delimiter: String,
}

fn quoted_options(classes: &[String]) -> String {
    let q: Vec<String> = classes.iter().map(|c| format!("\"{c}\"")).collect();
    match q.len() {
        0 => String::new(),
        1 => q[0].clone(),
        2 => format!("{} and {}", q[0], q[1]),
        n => format!("{}, or {}", q[..n - 1].join(", "), q[n - 1]),
    }
}

impl PromptTemplate {
    /// Template with the default output contract for `schema`.
    pub fn new(schema: &LabelSchema, initial_description: impl Into<String>) -> Self {
        let output_contract = format!(
            "Please choose your answer only from the {} options -- {}. \
             Complete the task very succinctly using only one word written between '{}' and '{}'.",
            schema.classes.len(),
            quoted_options(&schema.classes),
            schema.open_delimiter,
            schema.close_delimiter,
        );
        Self {
            task_name: schema.task_name.clone(),
            initial_description: initial_description.into(),
            output_contract,
            class_names: schema.classes.clone(),
            open_delimiter: schema.open_delimiter.clone(),
            close_delimiter: schema.close_delimiter.clone(),
        }
    }

    pub fn validate(&self, schema: &LabelSchema) -> Result<(), PromptError> {
        if self.class_names != schema.classes {
            return Err(PromptError::TemplateMismatch("class list differs".into()));
        }
        if self.open_delimiter != schema.open_delimiter || self.close_delimiter != schema.close_delimiter {
            return Err(PromptError::TemplateMismatch("delimiters differ".into()));
        }
        if !self.output_contract.contains(&self.open_delimiter) || !self.output_contract.contains(&self.close_delimiter) {
            return Err(PromptError::TemplateMismatch(
                "output contract must mention both delimiters".into(),
            ));
        }
        if self.initial_description.trim().is_empty() {
            return Err(PromptError::TemplateMismatch("empty task description".into()));
        }
        Ok(())
    }

    pub fn delimit(&self, label: &str) -> String {
        format!("{}{label}{}", self.open_delimiter, self.close_delimiter)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRule {
    pub class: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "class", rename_all = "snake_case")]
pub enum EditTarget {
    Rule(String),
    Correction,
}

/// One human edit, stored as a unified diff of the affected text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEdit {
    pub version: u64,
    pub actor: String,
    pub target: EditTarget,
    pub diff: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancedPrompt {
    pub base: PromptTemplate,
    /// One entry per class, in schema order.
    pub per_class_rules: Vec<ClassRule>,
    pub generation_trace: Vec<Rationale>,
    /// Explicit instructions against rules a reviewer found wrong.
    pub corrections: Vec<String>,
    pub human_edits: Vec<PromptEdit>,
    pub approved: bool,
    pub approved_by: Option<String>,
    pub version: u64,
}

fn unified_diff(old: &str, new: &str, label: &str) -> String {
    let mut old = old.to_string();
    let mut new = new.to_string();
    for s in [&mut old, &mut new] {
        if !s.is_empty() && !s.ends_with('\n') {
            s.push('\n');
        }
    }
    similar::TextDiff::from_lines(&old, &new)
        .unified_diff()
        .header(&format!("a/{label}"), &format!("b/{label}"))
        .to_string()
}

impl EnhancedPrompt {
    /// An unapproved prompt with the given rules; classes missing from
    /// `rules` get an empty entry.
    pub fn new(base: PromptTemplate, rules: Vec<ClassRule>, generation_trace: Vec<Rationale>) -> Self {
        let per_class_rules = base
            .class_names
            .iter()
            .map(|class| ClassRule {
                class: class.clone(),
                text: rules
                    .iter()
                    .find(|r| &r.class == class)
                    .map(|r| r.text.trim().to_string())
                    .unwrap_or_default(),
            })
            .collect();
        Self {
            base,
            per_class_rules,
            generation_trace,
            corrections: Vec::new(),
            human_edits: Vec::new(),
            approved: false,
            approved_by: None,
            version: 0,
        }
    }

    pub fn rule(&self, class: &str) -> Option<&str> {
        self.per_class_rules
            .iter()
            .find(|r| r.class == class)
            .map(|r| r.text.as_str())
    }

    pub fn empty_rules(&self) -> Vec<String> {
        self.per_class_rules
            .iter()
            .filter(|r| r.text.trim().is_empty())
            .map(|r| r.class.clone())
            .collect()
    }

    /// Replaces a class rule. Any edit withdraws approval.
    pub fn edit_rule(&mut self, class: &str, text: &str, actor: &str) -> Result<(), PromptError> {
        self.edit_rule_at(class, text, actor, Utc::now())
    }

    pub fn edit_rule_at(
        &mut self,
        class: &str,
        text: &str,
        actor: &str,
        timestamp: DateTime<Utc>,
    ) -> Result<(), PromptError> {
        let slot = self
            .per_class_rules
            .iter_mut()
            .find(|r| r.class == class)
            .ok_or_else(|| PromptError::UnknownClass(class.to_string()))?;
        let diff = unified_diff(&slot.text, text.trim(), &format!("rules/{class}"));
        slot.text = text.trim().to_string();
        self.push_edit(actor, EditTarget::Rule(class.to_string()), diff, timestamp);
        Ok(())
    }

    pub fn add_correction(&mut self, text: &str, actor: &str) {
        self.add_correction_at(text, actor, Utc::now())
    }

    pub fn add_correction_at(&mut self, text: &str, actor: &str, timestamp: DateTime<Utc>) {
        let before = self.corrections.join("\n");
        self.corrections.push(text.trim().to_string());
        let diff = unified_diff(&before, &self.corrections.join("\n"), "corrections");
        self.push_edit(actor, EditTarget::Correction, diff, timestamp);
    }

    fn push_edit(&mut self, actor: &str, target: EditTarget, diff: String, timestamp: DateTime<Utc>) {
        self.version += 1;
        self.approved = false;
        self.approved_by = None;
        self.human_edits.push(PromptEdit {
            version: self.version,
            actor: actor.to_string(),
            target,
            diff,
            timestamp,
        });
    }

    pub fn approve(&mut self, actor: &str) -> Result<(), PromptError> {
        let empty = self.empty_rules();
        if !empty.is_empty() {
            return Err(PromptError::EmptyRule(empty));
        }
        self.approved = true;
        self.approved_by = Some(actor.to_string());
        Ok(())
    }

    /// The description block used in every assembled prompt.
    pub fn task_block(&self) -> String {
        let mut out = String::new();
        out.push_str(self.base.initial_description.trim());
        out.push_str("\n\nLabeling rules:\n");
        for r in &self.per_class_rules {
            out.push_str(r.text.trim());
            out.push('\n');
        }
        if !self.corrections.is_empty() {
            out.push_str("\nCorrections:\n");
            for c in &self.corrections {
                out.push_str("- ");
                out.push_str(c);
                out.push('\n');
            }
        }
        out
    }

    /// Plain-text rendering for review, including the edit history.
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "# Task: {}\n# Version: {}\n# Approved: {}\n\n",
            self.base.task_name,
            self.version,
            match &self.approved_by {
                Some(a) if self.approved => format!("yes ({a})"),
                _ => "no".into(),
            }
        );
        out.push_str(&self.task_block());
        out.push('\n');
        out.push_str(&self.base.output_contract);
        out.push_str("\n\n# Edit history\n");
        if self.human_edits.is_empty() {
            out.push_str("(none)\n");
        }
        for e in &self.human_edits {
            out.push_str(&format!("## v{} by {} at {}\n{}\n", e.version, e.actor, e.timestamp.to_rfc3339(), e.diff));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> LabelSchema {
        LabelSchema::new("topic", &["politics", "business", "sport"]).unwrap()
    }

    #[test]
    fn contract_lists_options_and_delimiters() {
        let t = PromptTemplate::new(&schema(), "What is the major topic of the text?");
        assert!(t
            .output_contract
            .contains("from the 3 options -- \"politics\", \"business\", or \"sport\""));
        assert!(t.output_contract.contains("between '<' and '>'"));
        t.validate(&schema()).unwrap();
        let two = LabelSchema::new("s", &["positive", "negative"]).unwrap();
        assert!(PromptTemplate::new(&two, "d")
            .output_contract
            .contains("\"positive\" and \"negative\""));
    }

    #[test]
    fn edits_are_diffed_and_revoke_approval() {
        let t = PromptTemplate::new(&schema(), "d");
        let rules = vec![
            ClassRule {
                class: "politics".into(),
                text: "Choose <politics> when the text discusses government.".into(),
            },
            ClassRule {
                class: "business".into(),
                text: "Choose <business> when the text discusses markets.".into(),
            },
        ];
        let mut p = EnhancedPrompt::new(t, rules, vec![]);
        assert_eq!(p.per_class_rules.len(), 3);
        assert!(matches!(p.approve("lead"), Err(PromptError::EmptyRule(c)) if c == vec!["sport"]));
        p.edit_rule("sport", "Choose <sport> when the text discusses games.", "lead")
            .unwrap();
        p.approve("lead").unwrap();
        assert!(p.approved);
        p.add_correction("Do not treat stadium financing as sport.", "lead");
        assert!(!p.approved);
        assert_eq!(p.human_edits.len(), 2);
        assert!(p.human_edits[0].diff.contains("+Choose <sport>"));
        assert!(p.human_edits[1].diff.contains("+Do not treat"));
        assert!(p.task_block().contains("Corrections:\n- Do not treat"));
        assert!(matches!(p.edit_rule("weather", "x", "a"), Err(PromptError::UnknownClass(_))));
        assert!(p.render_text().contains("# Edit history"));
    }
}
