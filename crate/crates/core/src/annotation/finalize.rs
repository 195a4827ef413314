use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{AnnotationError, AnnotationRecord, MismatchRecord, Resolution};
use crate::store::Corpus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Agreement,
    Consensus,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalLabel {
    pub record_id: String,
    pub label: String,
    pub provenance: Provenance,
}

/// One label per corpus record, in corpus order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalLabeling {
    pub labels: Vec<FinalLabel>,
}

impl FinalLabeling {
    pub fn get(&self, record_id: &str) -> Option<&FinalLabel> {
        self.labels.iter().find(|l| l.record_id == record_id)
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.labels.iter().filter(|l| l.provenance == provenance).count()
    }

    /// `record_id,label,provenance` with a header row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["record_id", "label", "provenance"]).expect("in-memory write");
        for l in &self.labels {
            let p = match l.provenance {
                Provenance::Agreement => "agreement",
                Provenance::Consensus => "consensus",
                Provenance::Human => "human",
            };
            w.write_record([l.record_id.as_str(), l.label.as_str(), p]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }
}

/// A record whose judge verdict contradicts the label it arrived with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedItem {
    pub record_id: String,
    pub human_label: String,
    pub judge_label: String,
    pub judge_reasoning: String,
}

impl FlaggedItem {
    /// `record_id,human_label,judge_label,judge_reasoning` with a header row.
    pub fn to_csv(items: &[FlaggedItem]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["record_id", "human_label", "judge_label", "judge_reasoning"])
            .expect("in-memory write");
        for f in items {
            w.write_record([&f.record_id, &f.human_label, &f.judge_label, &f.judge_reasoning])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }
}

/// Records a human decision on a mismatch.
pub fn apply_override(
    corpus: &Corpus,
    record: &mut MismatchRecord,
    label: &str,
    actor: &str,
) -> Result<(), AnnotationError> {
    let canon = corpus
        .schema()
        .resolve(label)
        .ok_or_else(|| AnnotationError::UnknownLabel {
            record: record.record_id.clone(),
            label: label.to_string(),
        })?;
    record.final_label = Some(canon.to_string());
    record.resolution = Resolution::HumanOverride;
    record.override_actor = Some(actor.to_string());
    Ok(())
}

/// Merges agreed labels, judge resolutions and human overrides into one
/// label per record, and lists judge verdicts that contradict a supplied
/// human or gold label.
///
/// Overrides apply to mismatches only, so a record's provenance is
/// `Agreement` exactly when its annotators agreed.
pub fn finalize(
    corpus: &Corpus,
    annotations: &[AnnotationRecord],
    mismatches: &[MismatchRecord],
    overrides: &BTreeMap<String, String>,
) -> Result<(FinalLabeling, Vec<FlaggedItem>), AnnotationError> {
    let by_id: HashMap<&str, &AnnotationRecord> = annotations.iter().map(|a| (a.record_id.as_str(), a)).collect();
    let mm_by_id: HashMap<&str, &MismatchRecord> = mismatches.iter().map(|m| (m.record_id.as_str(), m)).collect();
    for (id, label) in overrides {
        match by_id.get(id.as_str()) {
            None => return Err(AnnotationError::UnknownRecord(id.clone())),
            Some(a) if a.agreed => return Err(AnnotationError::OverrideNotMismatch(id.clone())),
            Some(_) => {}
        }
        if corpus.schema().resolve(label).is_none() {
            return Err(AnnotationError::UnknownLabel {
                record: id.clone(),
                label: label.clone(),
            });
        }
    }

    let mut missing = Vec::new();
    let mut unresolved = Vec::new();
    let mut labels = Vec::with_capacity(corpus.len());
    for rec in corpus.records() {
        let id = rec.record_id.as_str();
        let Some(ann) = by_id.get(id) else {
            missing.push(id.to_string());
            continue;
        };
        let entry = if let Some(label) = ann.agreed_label() {
            Some((label.to_string(), Provenance::Agreement))
        } else if let Some(label) = overrides.get(id) {
            let canon = corpus.schema().resolve(label).expect("validated above");
            Some((canon.to_string(), Provenance::Human))
        } else {
            match mm_by_id.get(id) {
                Some(m) => match (&m.final_label, m.resolution) {
                    (Some(l), Resolution::Judge) => Some((l.clone(), Provenance::Consensus)),
                    (Some(l), Resolution::HumanOverride) => Some((l.clone(), Provenance::Human)),
                    _ => None,
                },
                None => None,
            }
        };
        match entry {
            Some((label, provenance)) => labels.push(FinalLabel {
                record_id: id.to_string(),
                label,
                provenance,
            }),
            None => unresolved.push(id.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(AnnotationError::MissingAnnotation(missing));
    }
    if !unresolved.is_empty() {
        return Err(AnnotationError::UnresolvedMismatch(unresolved));
    }

    let mut flagged = Vec::new();
    for m in mismatches {
        let (Some(rec), Some(judge_label)) = (corpus.get(&m.record_id), m.judge.verdict.label.as_deref()) else {
            continue;
        };
        if let Some(reference) = rec.reference_label() {
            if reference != judge_label {
                flagged.push(FlaggedItem {
                    record_id: m.record_id.clone(),
                    human_label: reference.to_string(),
                    judge_label: judge_label.to_string(),
                    judge_reasoning: m.judge.reasoning.clone(),
                });
            }
        }
    }
    Ok((FinalLabeling { labels }, flagged))
}
