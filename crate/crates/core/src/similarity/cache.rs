use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::SimilarityError;
use crate::backend::fingerprint;

/// Ordered pair key: provider plus the digests of both texts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    pub provider: String,
    pub a: String,
    pub b: String,
}

impl CacheKey {
    pub fn new(provider: &str, a: &str, b: &str) -> Self {
        Self {
            provider: provider.to_string(),
            a: fingerprint(a),
            b: fingerprint(b),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    provider_id: String,
    key: String,
    score: f64,
}

/// Similarity scores keyed by ordered pair, optionally mirrored to an
/// append-only JSONL file. Concurrent inserts of one key are last-write-wins.
pub struct ScoreCache {
    map: RwLock<HashMap<CacheKey, f64>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        Self {
            map: RwLock::new(HashMap::new()),
            file: None,
            path: None,
        }
    }

    /// Opens (or creates) a cache file, loading every complete record in it.
    pub fn open(path: &Path) -> Result<Self, SimilarityError> {
        let io = |e: std::io::Error| SimilarityError::CacheIo(format!("{}: {e}", path.display()));
        let mut map = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(io)?;
            // A torn final write leaves a partial last line; drop it so later
            // appends start on a fresh line.
            let complete = match text.rfind('\n') {
                Some(i) => i + 1,
                None => 0,
            };
            if complete < text.len() {
                let f = OpenOptions::new().write(true).open(path).map_err(io)?;
                f.set_len(complete as u64).map_err(io)?;
            }
            for (n, line) in text[..complete].lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheLine = serde_json::from_str(line).map_err(|e| {
                    SimilarityError::CacheIo(format!("{} line {}: {e}", path.display(), n + 1))
                })?;
                let Some((a, b)) = rec.key.split_once(':') else {
                    return Err(SimilarityError::CacheIo(format!(
                        "{} line {}: malformed key",
                        path.display(),
                        n + 1
                    )));
                };
                map.insert(
                    CacheKey {
                        provider: rec.provider_id,
                        a: a.to_string(),
                        b: b.to_string(),
                    },
                    rec.score,
                );
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        Ok(Self {
            map: RwLock::new(map),
            file: Some(Mutex::new(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, provider: &str, a: &str, b: &str) -> Option<f64> {
        self.map
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(&CacheKey::new(provider, a, b))
            .copied()
    }

    /// Looks up `(a, b)` first, then `(b, a)`.
    pub fn get_symmetric(&self, provider: &str, a: &str, b: &str) -> Option<f64> {
        self.get(provider, a, b).or_else(|| self.get(provider, b, a))
    }

    pub fn insert(&self, provider: &str, a: &str, b: &str, score: f64) -> Result<(), SimilarityError> {
        let key = CacheKey::new(provider, a, b);
        let line = serde_json::to_string(&CacheLine {
            provider_id: key.provider.clone(),
            key: format!("{}:{}", key.a, key.b),
            score,
        })
        .expect("cache line serializes");
        let fresh = self
            .map
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key, score)
            .is_none();
        if let (true, Some(file)) = (fresh, &self.file) {
            let mut f = file.lock().unwrap_or_else(|e| e.into_inner());
            f.write_all(format!("{line}\n").as_bytes())
                .map_err(|e| SimilarityError::CacheIo(e.to_string()))?;
        }
        Ok(())
    }

    /// Rewrites the backing file with one sorted line per key.
    pub fn compact(&self) -> Result<(), SimilarityError> {
        let (Some(path), Some(file)) = (&self.path, &self.file) else {
            return Ok(());
        };
        let mut guard = file.lock().unwrap_or_else(|e| e.into_inner());
        let map = self.map.read().unwrap_or_else(|e| e.into_inner());
        let mut entries: Vec<_> = map.iter().collect();
        entries.sort_by(|x, y| x.0.cmp(y.0));
        let mut body = String::new();
        for (k, v) in entries {
            body.push_str(
                &serde_json::to_string(&CacheLine {
                    provider_id: k.provider.clone(),
                    key: format!("{}:{}", k.a, k.b),
                    score: *v,
                })
                .expect("cache line serializes"),
            );
            body.push('\n');
        }
        let tmp = path.with_extension("jsonl.tmp");
        std::fs::write(&tmp, body).map_err(|e| SimilarityError::CacheIo(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| SimilarityError::CacheIo(e.to_string()))?;
        // The old handle points at the replaced inode.
        *guard = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| SimilarityError::CacheIo(e.to_string()))?;
        Ok(())
    }
}
