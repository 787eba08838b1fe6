//! Node-level memoization of worker calls.

use std::collections::HashMap;
use std::fmt;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{WorkerCall, WorkerResult};

/// Content digest of everything that determines a worker's behavior:
/// task id, base role, duty, capacity and the ordered parent outputs.
/// The agent type is deliberately not part of the key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey([u8; 32]);

fn put(h: &mut Sha256, bytes: &[u8]) {
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
}

impl CacheKey {
    pub fn for_call(call: &WorkerCall<'_>) -> Self {
        let mut h = Sha256::new();
        put(&mut h, call.task.id.as_bytes());
        put(&mut h, call.role.base_role.as_bytes());
        put(&mut h, call.role.duty.as_bytes());
        put(&mut h, call.capacity.as_str().as_bytes());
        h.update((call.parent_outputs.len() as u64).to_le_bytes());
        for (_, out) in &call.parent_outputs {
            h.update(Sha256::digest(out.as_bytes()));
        }
        CacheKey(h.finalize().into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(CacheKey(bytes.try_into().ok()?))
    }

    /// First eight bytes as an integer, handy for seeding.
    pub fn prefix_u64(&self) -> u64 {
        u64::from_le_bytes(self.0[..8].try_into().expect("8 bytes"))
    }
}

impl fmt::Debug for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CacheKey({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    seed: u64,
    key: String,
    result: WorkerResult,
}

/// Thread-safe cache of worker results keyed by `(seed, CacheKey)`.
///
/// The seed is part of the key so that stochastic backends never share a
/// result between differently seeded executions.
#[derive(Default)]
pub struct NodeCache {
    map: RwLock<HashMap<(u64, CacheKey), WorkerResult>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl NodeCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, seed: u64, key: &CacheKey) -> Option<WorkerResult> {
        let found = self
            .map
            .read()
            .expect("cache lock poisoned")
            .get(&(seed, *key))
            .cloned();
        match found {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        found
    }

    /// Inserting an existing key keeps the first value.
    pub fn insert(&self, seed: u64, key: CacheKey, result: WorkerResult) {
        self.map
            .write()
            .expect("cache lock poisoned")
            .entry((seed, key))
            .or_insert(result);
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn clear(&self) {
        self.map.write().expect("cache lock poisoned").clear();
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let map = self.map.read().expect("cache lock poisoned");
        let mut entries: Vec<Entry> = map
            .iter()
            .map(|((seed, key), result)| Entry {
                seed: *seed,
                key: key.to_hex(),
                result: result.clone(),
            })
            .collect();
        entries.sort_by(|a, b| (a.seed, &a.key).cmp(&(b.seed, &b.key)));
        let text = serde_json::to_string_pretty(&entries).map_err(io::Error::other)?;
        std::fs::write(path, text)
    }

    /// Load a cache file; a missing file yields an empty cache.
    pub fn load(path: &Path) -> io::Result<Self> {
        let cache = Self::new();
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(cache),
            Err(e) => return Err(e),
        };
        let entries: Vec<Entry> = serde_json::from_str(&text)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        for e in entries {
            let key = CacheKey::from_hex(&e.key).ok_or_else(|| {
                io::Error::new(io::ErrorKind::InvalidData, format!("bad cache key `{}`", e.key))
            })?;
            cache.insert(e.seed, key, e.result);
        }
        Ok(cache)
    }
}
