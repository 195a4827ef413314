//! Content-addressed snapshots of a run directory.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use super::run_store::{sha256_hex, EmbeddingVersion, RunStore};
use super::StoreError;

const MANIFEST_DIR: &str = "manifests";
const CURRENT: &str = "manifest.json";

/// Everything needed to reproduce a run: the corpus and embedding hashes,
/// the pool, the configuration hash and the hashes of stage artifacts.
/// Contains no timestamps, so identical runs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub corpus_hash: String,
    pub record_count: usize,
    pub embeddings: Vec<EmbeddingVersion>,
    pub pool_ids: Vec<String>,
    pub config_hash: String,
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default)]
pub struct ManifestInputs {
    pub pool_ids: Vec<String>,
    pub config_hash: String,
    /// Run-relative artifact paths; missing files are skipped.
    pub artifacts: Vec<String>,
}

impl Manifest {
    pub fn content_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("manifest serialises"))
    }
}

impl RunStore {
    /// Writes `manifests/<hash>.json` and refreshes `manifest.json`.
    pub fn snapshot(&self, corpus: &Corpus, inputs: &ManifestInputs) -> Result<(PathBuf, Manifest), StoreError> {
        let mut artifacts = BTreeMap::new();
        for rel in &inputs.artifacts {
            if let Some(h) = self.file_sha256(rel)? {
                artifacts.insert(rel.clone(), h);
            }
        }
        let manifest = Manifest {
            corpus_hash: corpus.content_hash(),
            record_count: corpus.len(),
            embeddings: self.embedding_versions()?,
            pool_ids: inputs.pool_ids.clone(),
            config_hash: inputs.config_hash.clone(),
            artifacts,
        };
        let rel = format!("{MANIFEST_DIR}/{}.json", manifest.content_hash());
        self.write_json(&rel, &manifest)?;
        self.write_json(CURRENT, &manifest)?;
        Ok((self.path(&rel), manifest))
    }

    pub fn current_manifest(&self) -> Result<Option<Manifest>, StoreError> {
        self.read_json(CURRENT)
    }

    /// Checks that the stored corpus, embeddings and artifacts still hash
    /// to what `manifest` recorded.
    pub fn verify_manifest(&self, manifest: &Manifest) -> Result<(), StoreError> {
        let corpus = self
            .load_corpus()?
            .ok_or_else(|| StoreError::ManifestMismatch("no corpus stored".into()))?;
        if corpus.content_hash() != manifest.corpus_hash {
            return Err(StoreError::ManifestMismatch("corpus hash differs".into()));
        }
        for v in &manifest.embeddings {
            match self.file_sha256(&v.file)? {
                Some(h) if h == v.sha256 => {}
                _ => return Err(StoreError::ManifestMismatch(format!("embedding file {} differs", v.file))),
            }
        }
        for (rel, want) in &manifest.artifacts {
            match self.file_sha256(rel)? {
                Some(h) if &h == want => {}
                _ => return Err(StoreError::ManifestMismatch(format!("artifact {rel} differs"))),
            }
        }
        Ok(())
    }
}
