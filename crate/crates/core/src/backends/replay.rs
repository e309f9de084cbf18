//! Record/replay of backend traffic keyed by a digest of the canonical request.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::transport::{Transport, TransportError};
use super::wire::Endpoint;

const CACHE_FILE: &str = "cache.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    /// Talk to the backends directly.
    #[default]
    Off,
    /// Serve hits from the cache, forward misses and store their responses.
    Record,
    /// Serve only from the cache; a miss is an error.
    Replay,
}

impl std::str::FromStr for ReplayMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "off" => Ok(ReplayMode::Off),
            "record" => Ok(ReplayMode::Record),
            "replay" => Ok(ReplayMode::Replay),
            _ => Err(format!("expected off, record or replay, got {s:?}")),
        }
    }
}

/// JSON text with object keys sorted at every level.
pub fn canonical_json(value: &Value) -> String {
    fn write(v: &Value, out: &mut String) {
        match v {
            Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                out.push('{');
                for (i, k) in keys.into_iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&Value::String(k.clone()).to_string());
                    out.push(':');
                    write(&map[k], out);
                }
                out.push('}');
            }
            Value::Array(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(item, out);
                }
                out.push(']');
            }
            scalar => out.push_str(&scalar.to_string()),
        }
    }
    let mut out = String::new();
    write(value, &mut out);
    out
}

/// Hex SHA-256 of the endpoint path and canonical request.
pub fn request_digest(endpoint: Endpoint, request: &Value) -> String {
    let mut h = Sha256::new();
    h.update(endpoint.path().as_bytes());
    h.update(b"\n");
    h.update(canonical_json(request).as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub digest: String,
    pub endpoint: Endpoint,
    pub request: Value,
    pub response: Value,
}

/// Recorded responses, optionally backed by `<dir>/cache.jsonl`.
#[derive(Default)]
pub struct ReplayCache {
    entries: RwLock<BTreeMap<String, CacheEntry>>,
    sink: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
}

impl ReplayCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (creating if needed) the cache stored in `dir`.
    pub fn open(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let path = dir.join(CACHE_FILE);
        let mut entries = BTreeMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheEntry = serde_json::from_str(&line).map_err(|e| {
                    std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), n + 1))
                })?;
                entries.insert(entry.digest.clone(), entry);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(ReplayCache {
            entries: RwLock::new(entries),
            sink: Some(Mutex::new(BufWriter::new(file))),
            path: Some(path),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, digest: &str) -> Option<Value> {
        self.entries.read().unwrap().get(digest).map(|e| e.response.clone())
    }

    pub fn insert(&self, endpoint: Endpoint, request: &Value, response: &Value) -> std::io::Result<()> {
        let entry = CacheEntry {
            digest: request_digest(endpoint, request),
            endpoint,
            request: request.clone(),
            response: response.clone(),
        };
        let mut entries = self.entries.write().unwrap();
        if entries.contains_key(&entry.digest) {
            return Ok(());
        }
        if let Some(sink) = &self.sink {
            let mut w = sink.lock().unwrap();
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        entries.insert(entry.digest.clone(), entry);
        Ok(())
    }

    /// Rewrite the backing file sorted by digest so recordings diff cleanly.
    pub fn compact(&self) -> std::io::Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        let entries = self.entries.read().unwrap();
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            for e in entries.values() {
                serde_json::to_writer(&mut w, e)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        if let Some(sink) = &self.sink {
            let mut w = sink.lock().unwrap();
            w.flush()?;
            std::fs::rename(&tmp, path)?;
            *w = BufWriter::new(OpenOptions::new().append(true).open(path)?);
        } else {
            std::fs::rename(&tmp, path)?;
        }
        Ok(())
    }
}

/// Serves requests from a [`ReplayCache`], forwarding misses to `inner` when
/// recording.
pub struct ReplayTransport {
    cache: Arc<ReplayCache>,
    inner: Option<Arc<dyn Transport>>,
}

impl ReplayTransport {
    /// Replay only.
    pub fn replay(cache: Arc<ReplayCache>) -> Self {
        ReplayTransport { cache, inner: None }
    }

    /// Replay hits, record misses from `inner`.
    pub fn record(cache: Arc<ReplayCache>, inner: Arc<dyn Transport>) -> Self {
        ReplayTransport {
            cache,
            inner: Some(inner),
        }
    }

    pub fn cache(&self) -> &Arc<ReplayCache> {
        &self.cache
    }
}

impl Transport for ReplayTransport {
    fn call(&self, endpoint: Endpoint, request: &Value) -> Result<Value, TransportError> {
        let digest = request_digest(endpoint, request);
        if let Some(hit) = self.cache.get(&digest) {
            return Ok(hit);
        }
        let Some(inner) = &self.inner else {
            return Err(TransportError::ReplayMiss(digest));
        };
        let response = inner.call(endpoint, request)?;
        self.cache
            .insert(endpoint, request, &response)
            .map_err(|e| TransportError::Unavailable(format!("replay cache write failed: {e}")))?;
        Ok(response)
    }
}
