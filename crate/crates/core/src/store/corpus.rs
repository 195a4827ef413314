use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::StoreError;

/// Task name, ordered classes and the markers the model writes its answer between.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub task_name: String,
    pub classes: Vec<String>,
    #[serde(default = "open_default")]
    pub open_delimiter: String,
    #[serde(default = "close_default")]
    pub close_delimiter: String,
}

fn open_default() -> String {
    "<".into()
}
fn close_default() -> String {
    ">".into()
}

impl LabelSchema {
    pub fn new(task_name: impl Into<String>, classes: &[&str]) -> Result<Self, StoreError> {
        let schema = Self {
            task_name: task_name.into(),
            classes: classes.iter().map(|c| c.to_string()).collect(),
            open_delimiter: open_default(),
            close_delimiter: close_default(),
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let mut seen = std::collections::HashSet::new();
        for c in &self.classes {
            let norm = normalize_label(c);
            if norm.is_empty() {
                return Err(StoreError::Schema("empty class name".into()));
            }
            if !seen.insert(norm) {
                return Err(StoreError::Schema(format!("duplicate class `{c}`")));
            }
            if c.contains(&self.open_delimiter) || c.contains(&self.close_delimiter) {
                return Err(StoreError::Schema(format!("class `{c}` contains a delimiter")));
            }
        }
        if seen.len() < 2 {
            return Err(StoreError::Schema("at least two classes are required".into()));
        }
        if self.open_delimiter.is_empty() || self.close_delimiter.is_empty() {
            return Err(StoreError::Schema("delimiters must be non-empty".into()));
        }
        Ok(())
    }

    /// Canonical class name for `label`, compared case-insensitively after trimming.
    pub fn resolve(&self, label: &str) -> Option<&str> {
        let want = normalize_label(label);
        self.classes
            .iter()
            .find(|c| normalize_label(c) == want)
            .map(String::as_str)
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        let want = normalize_label(label);
        self.classes.iter().position(|c| normalize_label(c) == want)
    }
}

pub(crate) fn normalize_label(label: &str) -> String {
    label.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    #[serde(rename = "id")]
    pub record_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl TextRecord {
    pub fn new(record_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            record_id: record_id.into(),
            text: text.into(),
            gold_label: None,
            human_label: None,
            source: None,
        }
    }

    pub fn with_gold(mut self, label: impl Into<String>) -> Self {
        self.gold_label = Some(label.into());
        self
    }

    /// The label a human supplied, falling back to the gold label.
    pub fn reference_label(&self) -> Option<&str> {
        self.human_label.as_deref().or(self.gold_label.as_deref())
    }
}

/// Stable id for a record that arrived without one.
pub fn content_id(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    format!("h{}", &hex::encode(digest)[..16])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    schema: LabelSchema,
    records: Vec<TextRecord>,
    index: HashMap<String, usize>,
}

impl Corpus {
    /// Validates ids, texts and labels; labels are rewritten to their
    /// canonical class spelling.
    pub fn new(schema: LabelSchema, records: Vec<TextRecord>) -> Result<Self, StoreError> {
        schema.validate()?;
        let mut corpus = Self {
            schema,
            records: Vec::with_capacity(records.len()),
            index: HashMap::with_capacity(records.len()),
        };
        for r in records {
            corpus.push(r)?;
        }
        Ok(corpus)
    }

    pub fn push(&mut self, mut record: TextRecord) -> Result<(), StoreError> {
        if record.text.trim().is_empty() {
            return Err(StoreError::EmptyText(record.record_id));
        }
        if record.record_id.is_empty() {
            record.record_id = content_id(&record.text);
        }
        if self.index.contains_key(&record.record_id) {
            return Err(StoreError::DuplicateId(record.record_id));
        }
        for slot in [&mut record.gold_label, &mut record.human_label] {
            if let Some(label) = slot.as_deref() {
                let canon = self.schema.resolve(label).ok_or_else(|| StoreError::UnknownLabel {
                    record: record.record_id.clone(),
                    label: label.to_string(),
                })?;
                *slot = Some(canon.to_string());
            }
        }
        self.index.insert(record.record_id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn records(&self) -> &[TextRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, record_id: &str) -> Option<&TextRecord> {
        self.index.get(record_id).map(|&i| &self.records[i])
    }

    pub fn position(&self, record_id: &str) -> Option<usize> {
        self.index.get(record_id).copied()
    }

    pub fn contains(&self, record_id: &str) -> bool {
        self.index.contains_key(record_id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.record_id.clone()).collect()
    }

    pub fn texts(&self) -> Vec<String> {
        self.records.iter().map(|r| r.text.clone()).collect()
    }

    /// Canonical JSONL serialisation, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 over the schema and the canonical record lines.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.schema).expect("schema serialises"));
        h.update(b"\n");
        h.update(self.to_jsonl().as_bytes());
        hex::encode(h.finalize())
    }
}

/// Loads a JSONL (`.jsonl`/`.json`/`.ndjson`) or CSV corpus.
pub fn ingest(path: &Path, schema: &LabelSchema) -> Result<Corpus, StoreError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let records = match ext.as_str() {
        "csv" => read_csv(path)?,
        _ => read_jsonl(path)?,
    };
    let mut corpus = Corpus::new(schema.clone(), Vec::new())?;
    for (line, record) in records {
        corpus.push(record).map_err(|e| match e {
            StoreError::EmptyText(_) => StoreError::Parse {
                line,
                message: "empty text".into(),
            },
            other => other,
        })?;
    }
    Ok(corpus)
}

fn read_jsonl(path: &Path) -> Result<Vec<(usize, TextRecord)>, StoreError> {
    #[derive(Deserialize)]
    struct Line {
        #[serde(default)]
        id: Option<serde_json::Value>,
        text: String,
        #[serde(default)]
        gold_label: Option<String>,
        #[serde(default)]
        human_label: Option<String>,
        #[serde(default)]
        source: Option<String>,
    }
    let file = std::fs::File::open(path).map_err(|e| StoreError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| StoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| StoreError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let id = match parsed.id {
            None | Some(serde_json::Value::Null) => String::new(),
            Some(serde_json::Value::String(s)) => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(other) => {
                return Err(StoreError::Parse {
                    line: line_no,
                    message: format!("id must be a string, got {other}"),
                })
            }
        };
        out.push((
            line_no,
            TextRecord {
                record_id: id,
                text: parsed.text,
                gold_label: parsed.gold_label.filter(|s| !s.trim().is_empty()),
                human_label: parsed.human_label.filter(|s| !s.trim().is_empty()),
                source: parsed.source,
            },
        ));
    }
    Ok(out)
}

fn read_csv(path: &Path) -> Result<Vec<(usize, TextRecord)>, StoreError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| StoreError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| StoreError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let text_col = col("text").ok_or_else(|| StoreError::Parse {
        line: 1,
        message: "missing `text` column".into(),
    })?;
    let (id_col, gold_col, human_col, source_col) = (col("id"), col("gold_label"), col("human_label"), col("source"));
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| StoreError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let field = |c: Option<usize>| {
            c.and_then(|c| row.get(c))
                .map(str::to_string)
                .filter(|s| !s.trim().is_empty())
        };
        out.push((
            line,
            TextRecord {
                record_id: field(id_col).unwrap_or_default(),
                text: row.get(text_col).unwrap_or_default().to_string(),
                gold_label: field(gold_col),
                human_label: field(human_col),
                source: field(source_col),
            },
        ));
    }
    Ok(out)
}
