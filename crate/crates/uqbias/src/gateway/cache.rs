//! Append-only JSONL request/response cache, keyed by request digest.
//!
//! Records are write-once: a digest that is already present is never
//! rewritten, so a finished experiment replays from disk with zero
//! backend calls. Loading tolerates a torn final line from an
//! interrupted run by truncating it away.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GatewayError, QueryOutcome, QueryPurpose, TokenLogprobs};
use crate::uq::OPTION_COUNT;

pub(crate) const SCHEMA_VERSION: u32 = 1;

/// The raw reply, or the reason it was unusable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ReplyRecord {
    Reply {
        sampled_token: String,
        top: Vec<(String, f64)>,
    },
    ProtocolError {
        message: String,
    },
}

/// One persisted query: raw reply, parsed distribution, canonical mapping
/// and provenance. Self-describing via `schema_version`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedQuery {
    pub schema_version: u32,
    pub digest: String,
    pub instance_id: String,
    pub purpose: QueryPurpose,
    pub temperature: f64,
    pub top_p: f64,
    pub prompt_sha256: String,
    pub image_sha256: String,
    pub canonical_map: [usize; OPTION_COUNT],
    pub reply: ReplyRecord,
    /// Canonical-order distribution, when label extraction succeeded.
    pub parsed_dist: Option<[f64; OPTION_COUNT]>,
    pub label_mass: Option<f64>,
    /// Wall-clock receive time; absent for deterministic backends so that
    /// reruns stay byte-identical.
    pub timestamp: Option<String>,
}

impl CachedQuery {
    pub(crate) fn outcome(&self) -> QueryOutcome {
        match &self.reply {
            ReplyRecord::Reply { sampled_token, top } => QueryOutcome::Reply(TokenLogprobs {
                sampled_token: sampled_token.clone(),
                top: top.clone(),
            }),
            ReplyRecord::ProtocolError { message } => {
                QueryOutcome::ProtocolFailure(message.clone())
            }
        }
    }
}

pub struct QueryCache {
    path: PathBuf,
    file: File,
    index: HashMap<String, CachedQuery>,
    recovered_torn_tail: bool,
}

impl QueryCache {
    /// Opens (or creates) the cache file and loads every intact record.
    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(path, &e))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, &e))?;

        let mut raw = String::new();
        file.read_to_string(&mut raw).map_err(|e| io_err(path, &e))?;

        let mut index = HashMap::new();
        let mut good_bytes = 0usize;
        let mut recovered_torn_tail = false;
        for line in raw.split_inclusive('\n') {
            let trimmed = line.trim_end_matches('\n');
            if trimmed.is_empty() {
                good_bytes += line.len();
                continue;
            }
            match serde_json::from_str::<CachedQuery>(trimmed) {
                Ok(record) => {
                    index.insert(record.digest.clone(), record);
                    good_bytes += line.len();
                }
                Err(_) => {
                    // Torn tail from an interrupted run; drop it and
                    // everything after.
                    recovered_torn_tail = true;
                    break;
                }
            }
        }
        if good_bytes < raw.len() {
            file.set_len(good_bytes as u64).map_err(|e| io_err(path, &e))?;
            file.seek(SeekFrom::End(0)).map_err(|e| io_err(path, &e))?;
        }

        Ok(Self {
            path: path.to_path_buf(),
            file,
            index,
            recovered_torn_tail,
        })
    }

    pub fn get(&self, digest: &str) -> Option<&CachedQuery> {
        self.index.get(digest)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn recovered_torn_tail(&self) -> bool {
        self.recovered_torn_tail
    }

    pub fn records(&self) -> impl Iterator<Item = &CachedQuery> {
        self.index.values()
    }

    /// Appends a record unless its digest is already present (write-once).
    pub fn append(&mut self, record: CachedQuery) -> Result<(), GatewayError> {
        if self.index.contains_key(&record.digest) {
            return Ok(());
        }
        let mut line = serde_json::to_string(&record)
            .map_err(|e| GatewayError::CacheIo(format!("serialize record: {e}")))?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|()| self.file.flush())
            .map_err(|e| io_err(&self.path, &e))?;
        self.index.insert(record.digest.clone(), record);
        Ok(())
    }
}

fn io_err(path: &Path, err: &std::io::Error) -> GatewayError {
    GatewayError::CacheIo(format!("{}: {err}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(digest: &str) -> CachedQuery {
        CachedQuery {
            schema_version: SCHEMA_VERSION,
            digest: digest.to_string(),
            instance_id: "inst".to_string(),
            purpose: QueryPurpose::Greedy,
            temperature: 1e-15,
            top_p: 1.0,
            prompt_sha256: "p".to_string(),
            image_sha256: "i".to_string(),
            canonical_map: [0, 1, 2, 3],
            reply: ReplyRecord::Reply {
                sampled_token: "0".to_string(),
                top: vec![("0".to_string(), -0.1)],
            },
            parsed_dist: Some([1.0, 0.0, 0.0, 0.0]),
            label_mass: Some(0.9),
            timestamp: None,
        }
    }

    #[test]
    fn round_trips_and_is_write_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queries.jsonl");
        {
            let mut cache = QueryCache::open(&path).unwrap();
            cache.append(record("a")).unwrap();
            cache.append(record("b")).unwrap();
            cache.append(record("a")).unwrap(); // duplicate, ignored
            assert_eq!(cache.len(), 2);
        }
        let cache = QueryCache::open(&path).unwrap();
        assert_eq!(cache.len(), 2);
        assert!(cache.get("a").is_some());
        let lines = std::fs::read_to_string(&path).unwrap();
        assert_eq!(lines.lines().count(), 2);
    }

    #[test]
    fn torn_tail_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queries.jsonl");
        {
            let mut cache = QueryCache::open(&path).unwrap();
            cache.append(record("a")).unwrap();
            cache.append(record("b")).unwrap();
        }
        // Simulate a kill mid-write.
        let full = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 17]).unwrap();

        let cache = QueryCache::open(&path).unwrap();
        assert!(cache.recovered_torn_tail());
        assert_eq!(cache.len(), 1);
        assert!(cache.get("a").is_some());
        // The file itself was repaired to the intact prefix.
        let repaired = std::fs::read_to_string(&path).unwrap();
        assert_eq!(repaired.lines().count(), 1);
    }
}
