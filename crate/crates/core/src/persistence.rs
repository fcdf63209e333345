//! File-backed document store: checksummed checkpoints plus append-only
//! JSON-lines logs.
//!
//! ```text
//! DATA_DIR/
//!   documents/
//!     d1/
//!       checkpoint-000001.json
//!       checkpoint-000002.json
//!       runs.jsonl
//!       log.jsonl
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::DocId;

const FORMAT: &str = "cowrite-checkpoint/1";
/// Older checkpoints beyond this many are pruned.
pub const KEEP_CHECKPOINTS: usize = 5;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("document {0} not found")]
    NotFound(DocId),
    #[error("corrupt record {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io { path: path.display().to_string(), source }
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u64,
    checksum: String,
    payload: Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON form of a value.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("value serializes").as_bytes())
}

#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, PersistError> {
        let root = root.into();
        let docs = root.join("documents");
        fs::create_dir_all(&docs).map_err(io_err(&docs))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn doc_dir(&self, doc: &DocId) -> PathBuf {
        self.root.join("documents").join(doc.as_str())
    }

    pub fn list_docs(&self) -> Result<Vec<DocId>, PersistError> {
        let dir = self.root.join("documents");
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            if entry.path().is_dir() {
                out.push(DocId::new(entry.file_name().to_string_lossy().into_owned()));
            }
        }
        out.sort();
        Ok(out)
    }

    /// Checkpoint versions on disk, ascending.
    pub fn checkpoint_versions(&self, doc: &DocId) -> Result<Vec<u64>, PersistError> {
        let dir = self.doc_dir(doc);
        if !dir.is_dir() {
            return Err(PersistError::NotFound(doc.clone()));
        }
        let mut versions: Vec<u64> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                name.strip_prefix("checkpoint-")?.strip_suffix(".json")?.parse().ok()
            })
            .collect();
        versions.sort_unstable();
        Ok(versions)
    }

    fn checkpoint_path(&self, doc: &DocId, version: u64) -> PathBuf {
        self.doc_dir(doc).join(format!("checkpoint-{version:06}.json"))
    }

    /// Writes the next checkpoint atomically and returns its version.
    pub fn save_checkpoint<T: Serialize>(&self, doc: &DocId, payload: &T) -> Result<u64, PersistError> {
        let dir = self.doc_dir(doc);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let version = self.checkpoint_versions(doc)?.last().map_or(1, |v| v + 1);
        let payload = serde_json::to_value(payload).expect("payload serializes");
        let checksum = sha256_hex(serde_json::to_string(&payload).expect("value serializes").as_bytes());
        let envelope = Envelope { format: FORMAT.into(), version, checksum, payload };
        let path = self.checkpoint_path(doc, version);
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            serde_json::to_writer(&mut f, &envelope).map_err(|e| PersistError::Io {
                path: tmp.display().to_string(),
                source: e.into(),
            })?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        self.prune(doc)?;
        Ok(version)
    }

    fn prune(&self, doc: &DocId) -> Result<(), PersistError> {
        let versions = self.checkpoint_versions(doc)?;
        if versions.len() > KEEP_CHECKPOINTS {
            for v in &versions[..versions.len() - KEEP_CHECKPOINTS] {
                let path = self.checkpoint_path(doc, *v);
                fs::remove_file(&path).map_err(io_err(&path))?;
            }
        }
        Ok(())
    }

    /// Loads one checkpoint; any damage is a corruption error.
    pub fn load_checkpoint<T: DeserializeOwned>(&self, doc: &DocId, version: u64) -> Result<T, PersistError> {
        let path = self.checkpoint_path(doc, version);
        let corrupt = |reason: String| PersistError::Corrupt { path: path.display().to_string(), reason };
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(PersistError::NotFound(doc.clone())),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let envelope: Envelope = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
        if envelope.format != FORMAT {
            return Err(corrupt(format!("unknown format {:?}", envelope.format)));
        }
        if envelope.version != version {
            return Err(corrupt(format!("header says version {}", envelope.version)));
        }
        let actual = sha256_hex(serde_json::to_string(&envelope.payload).expect("value serializes").as_bytes());
        if actual != envelope.checksum {
            return Err(corrupt("checksum mismatch".into()));
        }
        serde_json::from_value(envelope.payload).map_err(|e| corrupt(e.to_string()))
    }

    /// Newest checkpoint that loads cleanly, skipping damaged newer ones.
    pub fn load_latest<T: DeserializeOwned>(&self, doc: &DocId) -> Result<(u64, T), PersistError> {
        let versions = self.checkpoint_versions(doc)?;
        let mut first_error = None;
        for v in versions.into_iter().rev() {
            match self.load_checkpoint(doc, v) {
                Ok(state) => return Ok((v, state)),
                Err(e) => {
                    tracing::warn!(doc = %doc, version = v, error = %e, "skipping unreadable checkpoint");
                    first_error.get_or_insert(e);
                }
            }
        }
        Err(first_error.unwrap_or_else(|| PersistError::NotFound(doc.clone())))
    }

    fn append_line<T: Serialize>(&self, doc: &DocId, file: &str, record: &T) -> Result<(), PersistError> {
        let dir = self.doc_dir(doc);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(file);
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))
    }

    /// Reads a JSON-lines file. A torn final line (crash during append) is
    /// ignored; damage anywhere else is corruption.
    fn read_lines<T: DeserializeOwned>(&self, doc: &DocId, file: &str) -> Result<Vec<T>, PersistError> {
        let path = self.doc_dir(doc).join(file);
        let f = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let lines: Vec<String> = BufReader::new(f).lines().collect::<Result<_, _>>().map_err(io_err(&path))?;
        let mut out = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(v) => out.push(v),
                Err(_) if i + 1 == lines.len() => {
                    tracing::warn!(path = %path.display(), "ignoring torn last line");
                }
                Err(e) => {
                    return Err(PersistError::Corrupt {
                        path: path.display().to_string(),
                        reason: format!("line {}: {e}", i + 1),
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn append_run<T: Serialize>(&self, doc: &DocId, run: &T) -> Result<(), PersistError> {
        self.append_line(doc, "runs.jsonl", run)
    }

    pub fn read_runs<T: DeserializeOwned>(&self, doc: &DocId) -> Result<Vec<T>, PersistError> {
        self.read_lines(doc, "runs.jsonl")
    }

    pub fn append_log<T: Serialize>(&self, doc: &DocId, entry: &T) -> Result<(), PersistError> {
        self.append_line(doc, "log.jsonl", entry)
    }

    pub fn read_log<T: DeserializeOwned>(&self, doc: &DocId) -> Result<Vec<T>, PersistError> {
        self.read_lines(doc, "log.jsonl")
    }

    pub fn log_path(&self, doc: &DocId) -> PathBuf {
        self.doc_dir(doc).join("log.jsonl")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Rec {
        name: String,
        rate: f64,
        map: BTreeMap<u32, String>,
    }

    fn rec() -> Rec {
        Rec { name: "x".into(), rate: 0.85, map: BTreeMap::from([(3, "c".into())]) }
    }

    #[test]
    fn checkpoints_round_trip_and_increase() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let d = DocId::new("d1");
        assert_eq!(store.save_checkpoint(&d, &rec()).unwrap(), 1);
        assert_eq!(store.save_checkpoint(&d, &rec()).unwrap(), 2);
        let (v, back): (u64, Rec) = store.load_latest(&d).unwrap();
        assert_eq!((v, back), (2, rec()));
        assert_eq!(store.list_docs().unwrap(), vec![d]);
    }

    #[test]
    fn truncated_checkpoint_is_corrupt_and_recovery_falls_back() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let d = DocId::new("d1");
        store.save_checkpoint(&d, &rec()).unwrap();
        store.save_checkpoint(&d, &Rec { name: "newer".into(), ..rec() }).unwrap();
        let path = store.checkpoint_path(&d, 2);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(store.load_checkpoint::<Rec>(&d, 2), Err(PersistError::Corrupt { .. })));
        let (v, back): (u64, Rec) = store.load_latest(&d).unwrap();
        assert_eq!((v, back.name.as_str()), (1, "x"));
    }

    #[test]
    fn tampered_payload_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let d = DocId::new("d1");
        store.save_checkpoint(&d, &rec()).unwrap();
        let path = store.checkpoint_path(&d, 1);
        let text = fs::read_to_string(&path).unwrap().replace("\"x\"", "\"y\"");
        fs::write(&path, text).unwrap();
        let err = store.load_checkpoint::<Rec>(&d, 1).unwrap_err();
        assert!(err.to_string().contains("checksum mismatch"));
    }

    #[test]
    fn unknown_document_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(matches!(store.load_latest::<Rec>(&DocId::new("nope")), Err(PersistError::NotFound(_))));
    }

    #[test]
    fn old_checkpoints_are_pruned() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let d = DocId::new("d1");
        for _ in 0..8 {
            store.save_checkpoint(&d, &rec()).unwrap();
        }
        assert_eq!(store.checkpoint_versions(&d).unwrap(), vec![4, 5, 6, 7, 8]);
    }

    #[test]
    fn jsonl_tolerates_torn_tail_only() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let d = DocId::new("d1");
        store.append_run(&d, &rec()).unwrap();
        store.append_run(&d, &rec()).unwrap();
        let path = store.doc_dir(&d).join("runs.jsonl");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"name\":").unwrap();
        assert_eq!(store.read_runs::<Rec>(&d).unwrap().len(), 2);
        fs::write(&path, "garbage\n{\"name\":\"x\",\"rate\":1.0,\"map\":{}}\n").unwrap();
        assert!(matches!(store.read_runs::<Rec>(&d), Err(PersistError::Corrupt { .. })));
    }
}
