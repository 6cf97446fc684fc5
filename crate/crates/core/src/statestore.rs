//! Versioned key-value storage for world state held outside the servers,
//! with simulated latency charges and an optional write-through LRU cache.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("store unavailable")]
    StoreUnavailable,
}

/// Canonical key of a replicated object.
pub fn object_key(object_id: u32) -> String {
    format!("obj/{object_id}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Consistency {
    /// Linearizable per key.
    Cp,
    /// Reads may lag writes by up to `staleness_ms`.
    Ap { staleness_ms: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoreProfile {
    #[serde(default)]
    pub read_latency_ms: f64,
    #[serde(default)]
    pub write_latency_ms: f64,
    #[serde(default = "cp")]
    pub consistency: Consistency,
}

fn cp() -> Consistency {
    Consistency::Cp
}

impl Default for StoreProfile {
    fn default() -> Self {
        Self {
            read_latency_ms: 0.0,
            write_latency_ms: 0.0,
            consistency: Consistency::Cp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Versioned {
    pub value: Vec<u8>,
    pub version: u64,
}

/// A result together with the simulated time the operation cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Charged<T> {
    pub value: T,
    pub cost_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CasOutcome {
    Ok(u64),
    /// Carries the current version; 0 when the key is absent.
    Conflict(u64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StoreStats {
    pub reads: u64,
    pub writes: u64,
    pub conflicts: u64,
}

/// Operations take the virtual instant at which they take effect.
pub trait StateStore: Send + Sync {
    fn get(&self, key: &str, now_ms: f64) -> Result<Charged<Option<Versioned>>, StoreError>;

    /// Unconditional write; returns the new version.
    fn put(&self, key: &str, value: Vec<u8>, now_ms: f64) -> Result<Charged<u64>, StoreError>;

    /// Writes iff the current version equals `expected` (0 = absent).
    fn cas(&self, key: &str, expected: u64, value: Vec<u8>, now_ms: f64) -> Result<Charged<CasOutcome>, StoreError>;
}

#[derive(Debug, Clone)]
struct Entry {
    version: u64,
    committed_ms: f64,
    value: Vec<u8>,
}

#[derive(Debug)]
struct Inner {
    data: BTreeMap<String, Vec<Entry>>,
    rng: ChaCha8Rng,
    stats: StoreStats,
}

/// In-process reference store. Every operation runs under one lock, so
/// per-key operations are serialized.
#[derive(Debug)]
pub struct MemoryStore {
    profile: StoreProfile,
    available: AtomicBool,
    inner: Mutex<Inner>,
}

impl MemoryStore {
    pub fn new(profile: StoreProfile, seed: u64) -> Self {
        Self {
            profile,
            available: AtomicBool::new(true),
            inner: Mutex::new(Inner {
                data: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                stats: StoreStats::default(),
            }),
        }
    }

    pub fn cp(read_latency_ms: f64, write_latency_ms: f64) -> Self {
        Self::new(
            StoreProfile {
                read_latency_ms,
                write_latency_ms,
                consistency: Consistency::Cp,
            },
            0,
        )
    }

    pub fn profile(&self) -> StoreProfile {
        self.profile
    }

    /// Simulates an outage (`false`) or recovery (`true`).
    pub fn set_available(&self, available: bool) {
        self.available.store(available, Ordering::SeqCst);
    }

    pub fn stats(&self) -> StoreStats {
        self.lock().stats
    }

    /// Latest committed value of every key, for state comparisons.
    pub fn dump(&self) -> BTreeMap<String, Versioned> {
        self.lock()
            .data
            .iter()
            .filter_map(|(k, h)| {
                let e = h.last()?;
                Some((
                    k.clone(),
                    Versioned {
                        value: e.value.clone(),
                        version: e.version,
                    },
                ))
            })
            .collect()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn check(&self) -> Result<(), StoreError> {
        if self.available.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err(StoreError::StoreUnavailable)
        }
    }

    fn commit(&self, inner: &mut Inner, key: &str, value: Vec<u8>, now_ms: f64) -> u64 {
        let history = inner.data.entry(key.to_string()).or_default();
        let version = history.last().map_or(0, |e| e.version) + 1;
        history.push(Entry {
            version,
            committed_ms: now_ms,
            value,
        });
        match self.profile.consistency {
            Consistency::Cp => {
                let n = history.len();
                history.drain(..n - 1);
            }
            Consistency::Ap { staleness_ms } => {
                // keep the newest entry any future read could still observe
                let horizon = now_ms - staleness_ms;
                let keep_from = history
                    .iter()
                    .rposition(|e| e.committed_ms <= horizon)
                    .unwrap_or(0);
                history.drain(..keep_from);
            }
        }
        inner.stats.writes += 1;
        version
    }
}

impl StateStore for MemoryStore {
    fn get(&self, key: &str, now_ms: f64) -> Result<Charged<Option<Versioned>>, StoreError> {
        self.check()?;
        let mut inner = self.lock();
        inner.stats.reads += 1;
        let as_of = match self.profile.consistency {
            Consistency::Cp => now_ms,
            Consistency::Ap { staleness_ms } => {
                let lag = if staleness_ms > 0.0 {
                    inner.rng.gen_range(0.0..=staleness_ms)
                } else {
                    0.0
                };
                now_ms - lag
            }
        };
        let value = inner.data.get(key).and_then(|h| {
            h.iter().rev().find(|e| e.committed_ms <= as_of).map(|e| Versioned {
                value: e.value.clone(),
                version: e.version,
            })
        });
        Ok(Charged {
            value,
            cost_ms: self.profile.read_latency_ms,
        })
    }

    fn put(&self, key: &str, value: Vec<u8>, now_ms: f64) -> Result<Charged<u64>, StoreError> {
        self.check()?;
        let mut inner = self.lock();
        let version = self.commit(&mut inner, key, value, now_ms);
        Ok(Charged {
            value: version,
            cost_ms: self.profile.write_latency_ms,
        })
    }

    fn cas(&self, key: &str, expected: u64, value: Vec<u8>, now_ms: f64) -> Result<Charged<CasOutcome>, StoreError> {
        self.check()?;
        let mut inner = self.lock();
        let current = inner.data.get(key).and_then(|h| h.last()).map_or(0, |e| e.version);
        let outcome = if current == expected {
            CasOutcome::Ok(self.commit(&mut inner, key, value, now_ms))
        } else {
            inner.stats.conflicts += 1;
            CasOutcome::Conflict(current)
        };
        Ok(Charged {
            value: outcome,
            cost_ms: self.profile.write_latency_ms,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub capacity: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

#[derive(Debug, Default)]
struct Lru {
    capacity: usize,
    clock: u64,
    entries: HashMap<String, (u64, Versioned)>,
    order: BTreeMap<u64, String>,
    stats: CacheStats,
}

impl Lru {
    fn touch(&mut self, key: &str) -> Option<Versioned> {
        let (stamp, v) = self.entries.get_mut(key)?;
        self.order.remove(stamp);
        self.clock += 1;
        *stamp = self.clock;
        self.order.insert(self.clock, key.to_string());
        Some(v.clone())
    }

    fn insert(&mut self, key: &str, v: Versioned) {
        if self.capacity == 0 {
            return;
        }
        self.remove(key);
        while self.entries.len() >= self.capacity {
            let (_, victim) = self.order.pop_first().expect("non-empty");
            self.entries.remove(&victim);
            self.stats.evictions += 1;
        }
        self.clock += 1;
        self.order.insert(self.clock, key.to_string());
        self.entries.insert(key.to_string(), (self.clock, v));
    }

    fn remove(&mut self, key: &str) {
        if let Some((stamp, _)) = self.entries.remove(key) {
            self.order.remove(&stamp);
        }
    }
}

/// Write-through LRU cache in front of another store. Hits cost nothing.
pub struct CachedStore<S> {
    store: S,
    cache: Mutex<Lru>,
}

impl<S: StateStore> CachedStore<S> {
    pub fn new(store: S, config: CacheConfig) -> Self {
        Self {
            store,
            cache: Mutex::new(Lru {
                capacity: config.capacity,
                ..Lru::default()
            }),
        }
    }

    pub fn store(&self) -> &S {
        &self.store
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Lru> {
        self.cache.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn stats(&self) -> CacheStats {
        self.lock().stats
    }

    pub fn cached(&self, key: &str) -> Option<Versioned> {
        self.lock().entries.get(key).map(|(_, v)| v.clone())
    }

    pub fn len(&self) -> usize {
        self.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flush(&self) {
        let mut c = self.lock();
        c.entries.clear();
        c.order.clear();
    }

    pub fn cached_get(&self, key: &str, now_ms: f64) -> Result<Charged<Option<Versioned>>, StoreError> {
        {
            let mut c = self.lock();
            if let Some(v) = c.touch(key) {
                c.stats.hits += 1;
                return Ok(Charged {
                    value: Some(v),
                    cost_ms: 0.0,
                });
            }
            c.stats.misses += 1;
        }
        let r = self.store.get(key, now_ms)?;
        if let Some(v) = &r.value {
            self.lock().insert(key, v.clone());
        }
        Ok(r)
    }

    pub fn cached_put(&self, key: &str, value: Vec<u8>, now_ms: f64) -> Result<Charged<u64>, StoreError> {
        let r = self.store.put(key, value.clone(), now_ms)?;
        self.lock().insert(key, Versioned { value, version: r.value });
        Ok(r)
    }
}

impl<S: StateStore> StateStore for CachedStore<S> {
    fn get(&self, key: &str, now_ms: f64) -> Result<Charged<Option<Versioned>>, StoreError> {
        self.cached_get(key, now_ms)
    }

    fn put(&self, key: &str, value: Vec<u8>, now_ms: f64) -> Result<Charged<u64>, StoreError> {
        self.cached_put(key, value, now_ms)
    }

    fn cas(&self, key: &str, expected: u64, value: Vec<u8>, now_ms: f64) -> Result<Charged<CasOutcome>, StoreError> {
        let r = self.store.cas(key, expected, value.clone(), now_ms)?;
        let mut c = self.lock();
        match r.value {
            CasOutcome::Ok(version) => c.insert(key, Versioned { value, version }),
            CasOutcome::Conflict(_) => c.remove(key),
        }
        Ok(r)
    }
}

impl<S: StateStore + ?Sized> StateStore for std::sync::Arc<S> {
    fn get(&self, key: &str, now_ms: f64) -> Result<Charged<Option<Versioned>>, StoreError> {
        (**self).get(key, now_ms)
    }

    fn put(&self, key: &str, value: Vec<u8>, now_ms: f64) -> Result<Charged<u64>, StoreError> {
        (**self).put(key, value, now_ms)
    }

    fn cas(&self, key: &str, expected: u64, value: Vec<u8>, now_ms: f64) -> Result<Charged<CasOutcome>, StoreError> {
        (**self).cas(key, expected, value, now_ms)
    }
}
