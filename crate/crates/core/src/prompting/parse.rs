use serde::{Deserialize, Serialize};

use crate::store::LabelSchema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsePath {
    Delimited,
    FallbackScan,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedLabel {
    /// Canonical class name; `None` exactly when parsing failed.
    pub label: Option<String>,
    pub raw: String,
    pub parse_path: ParsePath,
}

impl ParsedLabel {
    pub fn failed(raw: &str) -> Self {
        Self {
            label: None,
            raw: raw.to_string(),
            parse_path: ParsePath::Failed,
        }
    }

    pub fn is_failed(&self) -> bool {
        self.parse_path == ParsePath::Failed
    }
}

/// Every `open…close` span in `text`, in order of appearance.
pub fn delimited_tokens<'a>(text: &'a str, open: &str, close: &str) -> Vec<&'a str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find(open) {
        let after = &rest[start + open.len()..];
        let Some(end) = after.find(close) else { break };
        let inner = &after[..end];
        // A nested opener means the earlier one was stray; restart from it.
        if let Some(nested) = inner.rfind(open) {
            out.push(&inner[nested + open.len()..]);
        } else {
            out.push(inner);
        }
        rest = &after[end + close.len()..];
    }
    out
}

/// Reads a class label out of a model response.
///
/// The last delimited token naming a class wins. Without one, the final
/// non-empty line is scanned for whole-word class names; exactly one
/// distinct match is accepted.
pub fn parse_label(text: &str, schema: &LabelSchema) -> ParsedLabel {
    for token in delimited_tokens(text, &schema.open_delimiter, &schema.close_delimiter)
        .into_iter()
        .rev()
    {
        if let Some(c) = schema.resolve(token.trim().trim_matches(|c| c == '"' || c == '\'')) {
            return ParsedLabel {
                label: Some(c.to_string()),
                raw: text.to_string(),
                parse_path: ParsePath::Delimited,
            };
        }
    }
    if let Some(c) = fallback_scan(text, schema) {
        return ParsedLabel {
            label: Some(c),
            raw: text.to_string(),
            parse_path: ParsePath::FallbackScan,
        };
    }
    ParsedLabel::failed(text)
}

fn fallback_scan(text: &str, schema: &LabelSchema) -> Option<String> {
    let line = text.lines().rev().find(|l| !l.trim().is_empty())?;
    let mut hay: Vec<char> = line.to_lowercase().chars().collect();
    let mut classes: Vec<&String> = schema.classes.iter().collect();
    classes.sort_by_key(|c| std::cmp::Reverse(c.chars().count()));
    let mut found: Vec<&String> = Vec::new();
    for class in classes {
        let needle: Vec<char> = class.trim().to_lowercase().chars().collect();
        if needle.is_empty() || needle.len() > hay.len() {
            continue;
        }
        let mut i = 0;
        let mut hit = false;
        while i + needle.len() <= hay.len() {
            let boundary_before = i == 0 || !hay[i - 1].is_alphanumeric();
            let boundary_after = i + needle.len() == hay.len() || !hay[i + needle.len()].is_alphanumeric();
            if boundary_before && boundary_after && hay[i..i + needle.len()] == needle[..] {
                hit = true;
                // Mask so a shorter class inside this one does not match.
                for ch in &mut hay[i..i + needle.len()] {
                    *ch = '\0';
                }
                i += needle.len();
            } else {
                i += 1;
            }
        }
        if hit {
            found.push(class);
        }
    }
    match found.as_slice() {
        [only] => Some((*only).clone()),
        _ => None,
    }
}
