//! Run configuration: one TOML file, `${VAR}` interpolation from the
//! environment, paths resolved against the file's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use labelkit_core::annotation::BatchConfig;
use labelkit_core::gateway::ProviderConfig;
use labelkit_core::geometry::ReducerSpec;
use labelkit_core::retrieval::MmrConfig;
use labelkit_core::store::LabelSchema;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("environment variables not set: {}", .0.join(", "))]
    MissingEnv(Vec<String>),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub name: String,
    pub classes: Vec<String>,
    /// The initial task description shown to every model.
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Providers {
    pub annotator_a: ProviderConfig,
    pub annotator_b: ProviderConfig,
    pub judge: ProviderConfig,
    pub embedder: ProviderConfig,
    /// Writes rationales and rules; the judge model when absent.
    #[serde(default)]
    pub generator: Option<ProviderConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub m: usize,
    pub seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { m: 80, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ApiConfig {
    /// Environment variable holding the shared bearer token.
    pub token_env: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub corpus_path: PathBuf,
    pub task: TaskConfig,
    pub providers: Providers,
    #[serde(default)]
    pub reducer: ReducerSpec,
    #[serde(default)]
    pub pool: PoolConfig,
    #[serde(default)]
    pub mmr: MmrConfig,
    #[serde(default)]
    pub batch: BatchConfig,
    #[serde(default)]
    pub api: ApiConfig,
}

/// Replaces `${NAME}` in every string value except mock scripts, whose
/// response templates use the same syntax for regex captures.
fn interpolate(value: &mut toml::Value, lookup: &dyn Fn(&str) -> Option<String>, missing: &mut BTreeSet<String>) {
    let pattern = Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static pattern");
    fn walk(
        v: &mut toml::Value,
        re: &Regex,
        lookup: &dyn Fn(&str) -> Option<String>,
        missing: &mut BTreeSet<String>,
    ) {
        match v {
            toml::Value::String(s) => {
                let replaced = re.replace_all(s, |caps: &regex::Captures| match lookup(&caps[1]) {
                    Some(val) => val,
                    None => {
                        missing.insert(caps[1].to_string());
                        String::new()
                    }
                });
                *s = replaced.into_owned();
            }
            toml::Value::Array(items) => items.iter_mut().for_each(|i| walk(i, re, lookup, missing)),
            toml::Value::Table(t) => {
                for (k, i) in t.iter_mut() {
                    if k != "mock" {
                        walk(i, re, lookup, missing);
                    }
                }
            }
            _ => {}
        }
    }
    walk(value, &pattern, lookup, missing);
}

fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Parse(format!("override `{assignment}` is not key=value")))?;
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| ConfigError::Parse(format!("override `{key}`: `{part}` is not inside a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(ConfigError::Parse("empty override key".into()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::load_with(path, &[])
    }

    /// Loads `path`, then applies `key.path=value` overrides. Values are read
    /// as TOML when they parse as such and as plain strings otherwise.
    pub fn load_with(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_with(&text, base, &|name| std::env::var(name).ok(), overrides)
    }

    /// Parses `text`, interpolating with `lookup` and resolving relative
    /// paths against `base`.
    pub fn from_toml(text: &str, base: &Path, lookup: &dyn Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        Self::from_toml_with(text, base, lookup, &[])
    }

    pub fn from_toml_with(
        text: &str,
        base: &Path,
        lookup: &dyn Fn(&str) -> Option<String>,
        overrides: &[String],
    ) -> Result<Self, ConfigError> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut missing = BTreeSet::new();
        interpolate(&mut value, lookup, &mut missing);
        if !missing.is_empty() {
            return Err(ConfigError::MissingEnv(missing.into_iter().collect()));
        }
        let mut cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for p in [&mut cfg.run_dir, &mut cfg.corpus_path] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.schema()?;
        let p = &self.providers;
        if p.annotator_a.provider_id == p.annotator_b.provider_id {
            return Err(ConfigError::Invalid(format!(
                "annotator_a and annotator_b must be different providers (both are `{}`)",
                p.annotator_a.provider_id
            )));
        }
        for cfg in [&p.annotator_a, &p.annotator_b, &p.judge, &p.embedder]
            .into_iter()
            .chain(p.generator.as_ref())
        {
            cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.pool.m == 0 {
            return Err(ConfigError::Invalid("pool.m must be positive".into()));
        }
        if self.reducer.target_dimension == 0 {
            return Err(ConfigError::Invalid("reducer.target_dimension must be positive".into()));
        }
        self.mmr.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.batch.batch_size == 0 || self.batch.concurrency == 0 {
            return Err(ConfigError::Invalid("batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<LabelSchema, ConfigError> {
        let classes: Vec<&str> = self.task.classes.iter().map(String::as_str).collect();
        LabelSchema::new(self.task.name.clone(), &classes).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn generator(&self) -> &ProviderConfig {
        self.providers.generator.as_ref().unwrap_or(&self.providers.judge)
    }

    /// Hash of everything that shapes the labels. Paths are left out so the
    /// same configuration in another directory hashes the same.
    pub fn content_hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.run_dir = PathBuf::new();
        semantic.corpus_path = PathBuf::new();
        semantic.api = ApiConfig::default();
        let json = serde_json::to_vec(&semantic).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }

    pub fn api_token(&self) -> Result<Option<String>, ConfigError> {
        match &self.api.token_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| ConfigError::MissingEnv(vec![var.clone()])),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
run_dir = "runs/x"
corpus_path = "data/c.jsonl"

[task]
name = "topic"
classes = ["a", "b"]
description = "Which topic?"

[providers.annotator_a]
provider_id = "${A_ID}"
model_name = "m"

[providers.annotator_b]
provider_id = "b"
model_name = "m"

[providers.judge]
provider_id = "j"
model_name = "m"
[providers.judge.mock]
rules = [{ pattern = "(x)", response = "${1}" }]

[providers.embedder]
provider_id = "e"
model_name = "emb"
"#;

    fn env(pairs: &'static [(&'static str, &'static str)]) -> impl Fn(&str) -> Option<String> {
        move |k| pairs.iter().find(|(n, _)| *n == k).map(|(_, v)| v.to_string())
    }

    #[test]
    fn interpolates_and_resolves_paths() {
        let cfg = RunConfig::from_toml(MINIMAL, Path::new("/base"), &env(&[("A_ID", "alpha")])).unwrap();
        assert_eq!(cfg.providers.annotator_a.provider_id, "alpha");
        assert_eq!(cfg.run_dir, PathBuf::from("/base/runs/x"));
        assert_eq!(cfg.pool.m, 80);
        assert_eq!(cfg.reducer.target_dimension, 24);
        assert_eq!(cfg.generator().provider_id, "j");
        // Mock templates keep their capture references.
        assert_eq!(cfg.providers.judge.mock.as_ref().unwrap().rules[0].response, "${1}");
    }

    #[test]
    fn names_missing_variables() {
        match RunConfig::from_toml(MINIMAL, Path::new("."), &env(&[])) {
            Err(ConfigError::MissingEnv(v)) => assert_eq!(v, vec!["A_ID"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn annotators_must_differ() {
        let err = RunConfig::from_toml(MINIMAL, Path::new("."), &env(&[("A_ID", "b")])).unwrap_err();
        assert!(err.to_string().contains("different providers"));
    }

    #[test]
    fn dotted_overrides() {
        let cfg = RunConfig::from_toml_with(
            MINIMAL,
            Path::new("/b"),
            &env(&[("A_ID", "alpha")]),
            &["pool.m=20".into(), "mmr.lambda=0.25".into(), "task.name=stance".into()],
        )
        .unwrap();
        assert_eq!(cfg.pool.m, 20);
        assert_eq!(cfg.mmr.lambda, 0.25);
        assert_eq!(cfg.task.name, "stance");
        assert!(RunConfig::from_toml_with(MINIMAL, Path::new("/b"), &env(&[("A_ID", "a")]), &["nokey".into()]).is_err());
    }

    #[test]
    fn hash_ignores_location() {
        let a = RunConfig::from_toml(MINIMAL, Path::new("/one"), &env(&[("A_ID", "alpha")])).unwrap();
        let mut b = RunConfig::from_toml(MINIMAL, Path::new("/two"), &env(&[("A_ID", "alpha")])).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        b.pool.m = 7;
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
