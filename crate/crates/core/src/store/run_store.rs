use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::corpus::{Corpus, LabelSchema, TextRecord};
use super::matrix_file::{encode_matrix, read_matrix};
use super::StoreError;
use crate::matrix::EmbeddingMatrix;

const RECORDS: &str = "records.jsonl";
const SCHEMA: &str = "schema.json";
const EMBED_DIR: &str = "embeddings";
const EMBED_INDEX: &str = "embeddings/index.json";
const LOCK: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingVersion {
    pub model_name: String,
    pub reduced: bool,
    pub version: u32,
    pub dimension: usize,
    pub rows: usize,
    /// Path relative to the run directory.
    pub file: String,
    pub sha256: String,
}

/// Exclusive advisory lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    file: File,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = self.file.unlock();
    }
}

/// A run directory on disk.
///
/// Callers that mutate the directory hold a [`RunLock`] for the duration
/// of the stage; a second writer gets [`StoreError::LockHeld`].
#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| StoreError::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp).map_err(|e| StoreError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| StoreError::io(&tmp, e))?;
        f.sync_all().map_err(|e| StoreError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| StoreError::io(path, e))
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

impl RunStore {
    /// Opens (creating if needed) a run directory.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| StoreError::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    pub fn lock(&self) -> Result<RunLock, StoreError> {
        let path = self.path(LOCK);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| StoreError::io(&path, e))?;
        match file.try_lock() {
            Ok(()) => Ok(RunLock { file }),
            Err(fs::TryLockError::WouldBlock) => Err(StoreError::LockHeld(self.root.display().to_string())),
            Err(fs::TryLockError::Error(e)) => Err(StoreError::io(&path, e)),
        }
    }

    pub fn write_bytes(&self, rel: &str, bytes: &[u8]) -> Result<(), StoreError> {
        write_atomic(&self.path(rel), bytes)
    }

    pub fn read_bytes(&self, rel: &str) -> Result<Option<Vec<u8>>, StoreError> {
        let path = self.path(rel);
        match fs::read(&path) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(StoreError::io(&path, e)),
        }
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<(), StoreError> {
        self.write_bytes(rel, text.as_bytes())
    }

    pub fn read_text(&self, rel: &str) -> Result<Option<String>, StoreError> {
        Ok(self
            .read_bytes(rel)?
            .map(|b| String::from_utf8_lossy(&b).into_owned()))
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, rel: &str, value: &T) -> Result<(), StoreError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| StoreError::Json {
            path: rel.into(),
            message: e.to_string(),
        })?;
        bytes.push(b'\n');
        self.write_bytes(rel, &bytes)
    }

    pub fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<Option<T>, StoreError> {
        match self.read_bytes(rel)? {
            None => Ok(None),
            Some(b) => serde_json::from_slice(&b).map(Some).map_err(|e| StoreError::Json {
                path: rel.into(),
                message: e.to_string(),
            }),
        }
    }

    pub fn write_jsonl<T: Serialize>(&self, rel: &str, items: &[T]) -> Result<(), StoreError> {
        let mut out = Vec::new();
        for item in items {
            serde_json::to_writer(&mut out, item).map_err(|e| StoreError::Json {
                path: rel.into(),
                message: e.to_string(),
            })?;
            out.push(b'\n');
        }
        self.write_bytes(rel, &out)
    }

    pub fn read_jsonl<T: DeserializeOwned>(&self, rel: &str) -> Result<Option<Vec<T>>, StoreError> {
        let Some(text) = self.read_text(rel)? else {
            return Ok(None);
        };
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| StoreError::Json {
                    path: format!("{rel}:{}", i + 1),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }

    pub fn file_sha256(&self, rel: &str) -> Result<Option<String>, StoreError> {
        Ok(self.read_bytes(rel)?.map(|b| sha256_hex(&b)))
    }

    pub fn save_corpus(&self, corpus: &Corpus) -> Result<(), StoreError> {
        self.write_json(SCHEMA, corpus.schema())?;
        self.write_text(RECORDS, &corpus.to_jsonl())
    }

    pub fn load_corpus(&self) -> Result<Option<Corpus>, StoreError> {
        let Some(schema) = self.read_json::<LabelSchema>(SCHEMA)? else {
            return Ok(None);
        };
        let records: Vec<TextRecord> = self.read_jsonl(RECORDS)?.unwrap_or_default();
        Corpus::new(schema, records).map(Some)
    }

    pub fn embedding_versions(&self) -> Result<Vec<EmbeddingVersion>, StoreError> {
        Ok(self.read_json(EMBED_INDEX)?.unwrap_or_default())
    }

    /// Stores `matrix` as a new version for its (model, reduced) key and
    /// returns the version together with the matrix as it now reads back
    /// from disk. Re-attaching bytes identical to the latest version is a
    /// no-op that returns that version.
    pub fn attach_embeddings(
        &self,
        corpus: &Corpus,
        matrix: &EmbeddingMatrix,
    ) -> Result<(EmbeddingVersion, EmbeddingMatrix), StoreError> {
        if let Some(id) = matrix.record_ids().iter().find(|id| !corpus.contains(id)) {
            return Err(StoreError::UnknownRecord(id.clone()));
        }
        let mut versions = self.embedding_versions()?;
        let same_key: Vec<&EmbeddingVersion> = versions
            .iter()
            .filter(|v| v.model_name == matrix.model_name() && v.reduced == matrix.reduced())
            .collect();
        if let Some(prev) = same_key.first() {
            if prev.dimension != matrix.dimension() {
                return Err(StoreError::DimensionMismatch {
                    model: matrix.model_name().to_string(),
                    expected: prev.dimension,
                    found: matrix.dimension(),
                });
            }
        }
        let bytes = encode_matrix(matrix);
        let digest = sha256_hex(&bytes);
        if let Some(latest) = same_key.iter().max_by_key(|v| v.version) {
            if latest.sha256 == digest {
                let latest = (*latest).clone();
                let m = read_matrix(&self.path(&latest.file))?;
                return Ok((latest, m));
            }
        }
        let version = same_key.iter().map(|v| v.version).max().unwrap_or(0) + 1;
        let file = format!(
            "{EMBED_DIR}/{}__{}.v{version}.mat",
            slug(matrix.model_name()),
            if matrix.reduced() { "reduced" } else { "raw" }
        );
        super::matrix_file::write_matrix(&self.path(&file), matrix)?;
        let entry = EmbeddingVersion {
            model_name: matrix.model_name().to_string(),
            reduced: matrix.reduced(),
            version,
            dimension: matrix.dimension(),
            rows: matrix.len(),
            file,
            sha256: digest,
        };
        versions.push(entry.clone());
        self.write_json(EMBED_INDEX, &versions)?;
        Ok((entry, matrix.quantized()))
    }

    /// Latest version (or the given one) for a (model, reduced) key.
    pub fn embedding_version(
        &self,
        model_name: &str,
        reduced: bool,
        version: Option<u32>,
    ) -> Result<EmbeddingVersion, StoreError> {
        self.embedding_versions()?
            .into_iter()
            .filter(|v| v.model_name == model_name && v.reduced == reduced)
            .filter(|v| version.is_none_or(|want| v.version == want))
            .max_by_key(|v| v.version)
            .ok_or_else(|| StoreError::MissingEmbeddings {
                model: model_name.to_string(),
                reduced,
            })
    }

    pub fn load_embeddings(
        &self,
        model_name: &str,
        reduced: bool,
        version: Option<u32>,
    ) -> Result<EmbeddingMatrix, StoreError> {
        let v = self.embedding_version(model_name, reduced, version)?;
        read_matrix(&self.path(&v.file))
    }

    pub fn fetch_vector(&self, model_name: &str, reduced: bool, record_id: &str) -> Result<Vec<f64>, StoreError> {
        let m = self.load_embeddings(model_name, reduced, None)?;
        m.vector(record_id)
            .map(<[f64]>::to_vec)
            .map_err(|_| StoreError::UnknownRecord(record_id.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Corpus {
        let schema = LabelSchema::new("t", &["a", "b"]).unwrap();
        Corpus::new(
            schema,
            vec![
                TextRecord::new("r1", "one").with_gold("a"),
                TextRecord::new("r2", "two"),
                TextRecord::new("r3", "three").with_gold("B"),
            ],
        )
        .unwrap()
    }

    fn matrix(dim: usize, scale: f64) -> EmbeddingMatrix {
        let ids = vec!["r1".to_string(), "r2".into(), "r3".into()];
        let rows = (0..3)
            .map(|i| (0..dim).map(|j| scale * (i * dim + j) as f64 / 7.0).collect())
            .collect();
        EmbeddingMatrix::new(ids, rows, "mock-embed", false).unwrap()
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        assert!(store.load_corpus().unwrap().is_none());
        let c = corpus();
        store.save_corpus(&c).unwrap();
        let back = store.load_corpus().unwrap().unwrap();
        assert_eq!(back, c);
        assert_eq!(back.content_hash(), c.content_hash());
    }

    #[test]
    fn attach_versions_and_dimension_check() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        let c = corpus();
        let (v1, m1) = store.attach_embeddings(&c, &matrix(4, 1.0)).unwrap();
        assert_eq!(v1.version, 1);
        assert_eq!(m1, matrix(4, 1.0).quantized());
        let (same, _) = store.attach_embeddings(&c, &matrix(4, 1.0)).unwrap();
        assert_eq!(same, v1);
        let (v2, _) = store.attach_embeddings(&c, &matrix(4, 2.0)).unwrap();
        assert_eq!(v2.version, 2);
        assert_eq!(store.load_embeddings("mock-embed", false, Some(1)).unwrap(), m1);
        assert_eq!(store.embedding_version("mock-embed", false, None).unwrap(), v2);
        let err = store.attach_embeddings(&c, &matrix(5, 1.0)).unwrap_err();
        assert!(matches!(err, StoreError::DimensionMismatch { expected: 4, found: 5, .. }));
        let v = store.fetch_vector("mock-embed", false, "r2").unwrap();
        assert_eq!(v, matrix(4, 2.0).quantized().vector("r2").unwrap());
        assert!(matches!(
            store.fetch_vector("mock-embed", false, "nope"),
            Err(StoreError::UnknownRecord(_))
        ));
    }

    #[test]
    fn unknown_record_in_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        let m = EmbeddingMatrix::new(vec!["zz".into()], vec![vec![1.0]], "m", false).unwrap();
        assert!(matches!(
            store.attach_embeddings(&corpus(), &m),
            Err(StoreError::UnknownRecord(id)) if id == "zz"
        ));
    }

    #[test]
    fn second_writer_sees_lock() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        let guard = store.lock().unwrap();
        assert!(matches!(store.lock(), Err(StoreError::LockHeld(_))));
        drop(guard);
        store.lock().unwrap();
    }

    #[test]
    fn jsonl_helpers() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        assert!(store.read_jsonl::<u32>("x.jsonl").unwrap().is_none());
        store.write_jsonl("x.jsonl", &[1u32, 2, 3]).unwrap();
        assert_eq!(store.read_jsonl::<u32>("x.jsonl").unwrap().unwrap(), vec![1, 2, 3]);
        assert!(!store.exists("x.jsonl.tmp"));
    }
}
