//! Two-tier content cache for sample payloads.
//!
//! Lookups go local → shared → storage. Entries are whole member payloads
//! keyed by the sample's uid and stored at `objects/<2>/<2>/<hex>`; the local
//! tier keeps an append-only access journal that drives LRU eviction.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::storage::{ByteRange, SourceUri, Storage};
use crate::table::SampleRef;

pub const DEFAULT_MAX_LOCAL_BYTES: u64 = 1 << 30;
const JOURNAL: &str = "journal";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheConfig {
    pub local_dir: PathBuf,
    pub shared_dir: Option<PathBuf>,
    pub max_local_bytes: u64,
    /// Evict as soon as an insert pushes the local tier over its cap.
    pub evict_on_insert: bool,
}

impl CacheConfig {
    pub fn new(local_dir: impl Into<PathBuf>) -> Self {
        CacheConfig {
            local_dir: local_dir.into(),
            shared_dir: None,
            max_local_bytes: DEFAULT_MAX_LOCAL_BYTES,
            evict_on_insert: true,
        }
    }

    /// Applies `DF_CACHE_DIR`, `DF_SHARED_CACHE_DIR` and `DF_CACHE_MAX_BYTES`.
    pub fn from_env(default_local: impl Into<PathBuf>) -> Result<Self> {
        let mut c = CacheConfig::new(default_local);
        if let Some(dir) = env_nonempty("DF_CACHE_DIR") {
            c.local_dir = dir.into();
        }
        if let Some(dir) = env_nonempty("DF_SHARED_CACHE_DIR") {
            c.shared_dir = Some(dir.into());
        }
        if let Some(max) = env_nonempty("DF_CACHE_MAX_BYTES") {
            c.max_local_bytes = max
                .parse()
                .map_err(|_| Error::BadArgument(format!("DF_CACHE_MAX_BYTES={max:?} is not a byte count")))?;
        }
        if c.max_local_bytes == 0 {
            return Err(Error::BadArgument("cache size limit must be > 0".into()));
        }
        Ok(c)
    }
}

fn env_nonempty(key: &str) -> Option<String> {
    std::env::var(key).ok().filter(|v| !v.is_empty())
}

/// Process-local counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub local_hits: u64,
    pub local_misses: u64,
    pub shared_hits: u64,
    pub shared_misses: u64,
    pub storage_fetches: u64,
    pub corrupt_entries: u64,
    pub evicted_bytes: u64,
}

#[derive(Debug, Default)]
struct Counters {
    local_hits: AtomicU64,
    local_misses: AtomicU64,
    shared_hits: AtomicU64,
    shared_misses: AtomicU64,
    storage_fetches: AtomicU64,
    corrupt_entries: AtomicU64,
    evicted_bytes: AtomicU64,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

#[derive(Debug)]
pub struct Cache {
    config: CacheConfig,
    storage: Storage,
    counters: Counters,
    inflight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    /// Tracked local size; `None` until first scanned.
    local_size: Mutex<Option<u64>>,
    journal: Mutex<()>,
}

impl Cache {
    pub fn new(config: CacheConfig, storage: Storage) -> Result<Self> {
        if config.max_local_bytes == 0 {
            return Err(Error::BadArgument("cache size limit must be > 0".into()));
        }
        for dir in std::iter::once(&config.local_dir).chain(config.shared_dir.as_ref()) {
            fs::create_dir_all(dir.join("objects"))
                .map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
        Ok(Cache {
            config,
            storage,
            counters: Counters::default(),
            inflight: Mutex::new(HashMap::new()),
            local_size: Mutex::new(None),
            journal: Mutex::new(()),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn stats(&self) -> CacheStats {
        let c = &self.counters;
        CacheStats {
            local_hits: c.local_hits.load(Ordering::Relaxed),
            local_misses: c.local_misses.load(Ordering::Relaxed),
            shared_hits: c.shared_hits.load(Ordering::Relaxed),
            shared_misses: c.shared_misses.load(Ordering::Relaxed),
            storage_fetches: c.storage_fetches.load(Ordering::Relaxed),
            corrupt_entries: c.corrupt_entries.load(Ordering::Relaxed),
            evicted_bytes: c.evicted_bytes.load(Ordering::Relaxed),
        }
    }

    pub fn entry_path(dir: &Path, key: &str) -> PathBuf {
        dir.join("objects").join(&key[..2]).join(&key[2..4]).join(key)
    }

    pub fn get_or_fetch(&self, key: &str, r: &SampleRef) -> Result<Vec<u8>> {
        if key != r.uid() {
            return Err(Error::BadArgument(format!("cache key {key} is not the uid of {r:?}")));
        }
        Ok(self.get_or_fetch_many(std::slice::from_ref(r))?.remove(0))
    }

    /// Fetches many samples. Misses are grouped per source object and read
    /// with coalesced ranged requests, then cached member by member.
    pub fn get_or_fetch_many(&self, refs: &[SampleRef]) -> Result<Vec<Vec<u8>>> {
        let keys: Vec<String> = refs.iter().map(SampleRef::uid).collect();
        let mut out: Vec<Option<Vec<u8>>> = vec![None; refs.len()];
        let mut missing = Vec::new();
        for (i, r) in refs.iter().enumerate() {
            if r.length == 0 {
                out[i] = Some(Vec::new());
            } else if let Some(data) = self.lookup_local(&keys[i], r)? {
                out[i] = Some(data);
            } else {
                missing.push(i);
            }
        }
        if missing.is_empty() {
            return Ok(out.into_iter().map(Option::unwrap).collect());
        }

        // Single-flight: hold every missing key's lock (sorted, so two
        // batches cannot deadlock), then re-check before fetching.
        let mut lock_keys: Vec<&str> = missing.iter().map(|&i| keys[i].as_str()).collect();
        lock_keys.sort_unstable();
        lock_keys.dedup();
        let locks: Vec<Arc<Mutex<()>>> = {
            let mut map = self.inflight.lock().unwrap();
            lock_keys
                .iter()
                .map(|k| map.entry(k.to_string()).or_default().clone())
                .collect()
        };
        let guards: Vec<_> = locks.iter().map(|l| l.lock().unwrap()).collect();
        let result = self.fill_missing(refs, &keys, &missing, &mut out);
        drop(guards);
        drop(locks);
        {
            let mut map = self.inflight.lock().unwrap();
            for k in lock_keys {
                if map.get(k).is_some_and(|l| Arc::strong_count(l) == 1) {
                    map.remove(k);
                }
            }
        }
        result?;
        if self.config.evict_on_insert {
            let over = self
                .local_size
                .lock()
                .unwrap()
                .is_some_and(|s| s > self.config.max_local_bytes);
            if over {
                self.evict_to_limit()?;
            }
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    }

    fn fill_missing(
        &self,
        refs: &[SampleRef],
        keys: &[String],
        missing: &[usize],
        out: &mut [Option<Vec<u8>>],
    ) -> Result<()> {
        let mut to_fetch: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for &i in missing {
            if out[i].is_some() {
                continue;
            }
            // Another thread may have filled it while we waited.
            if let Some(data) = self.read_entry(&self.config.local_dir, &keys[i], &refs[i])? {
                out[i] = Some(data);
                self.touch(&keys[i]);
                continue;
            }
            if let Some(shared) = &self.config.shared_dir {
                if let Some(data) = self.read_entry(shared, &keys[i], &refs[i])? {
                    bump(&self.counters.shared_hits);
                    self.insert_local(&keys[i], &data)?;
                    out[i] = Some(data);
                    continue;
                }
                bump(&self.counters.shared_misses);
            }
            to_fetch.entry(refs[i].source_uri.as_str()).or_default().push(i);
        }

        for (uri, idxs) in to_fetch {
            // Duplicate refs within one call are fetched once.
            let mut unique: Vec<usize> = Vec::new();
            let mut seen: HashMap<&str, usize> = HashMap::new();
            for &i in &idxs {
                seen.entry(keys[i].as_str()).or_insert_with(|| {
                    unique.push(i);
                    i
                });
            }
            let source = SourceUri::parse(uri)?;
            let ranges = unique
                .iter()
                .map(|&i| ByteRange::new(refs[i].offset, refs[i].length))
                .collect::<Result<Vec<_>>>()?;
            let before = self.storage.stats().get_count;
            let payloads = self.storage.read_ranges(&source, &ranges)?;
            self.counters
                .storage_fetches
                .fetch_add(self.storage.stats().get_count - before, Ordering::Relaxed);
            for (&i, data) in unique.iter().zip(payloads) {
                if let Some(shared) = &self.config.shared_dir {
                    write_entry(shared, &keys[i], &data)?;
                }
                self.insert_local(&keys[i], &data)?;
                out[i] = Some(data);
            }
            for &i in &idxs {
                if out[i].is_none() {
                    out[i] = out[seen[keys[i].as_str()]].clone();
                }
            }
        }
        Ok(())
    }

    fn lookup_local(&self, key: &str, r: &SampleRef) -> Result<Option<Vec<u8>>> {
        match self.read_entry(&self.config.local_dir, key, r)? {
            Some(data) => {
                bump(&self.counters.local_hits);
                self.touch(key);
                Ok(Some(data))
            }
            None => {
                bump(&self.counters.local_misses);
                Ok(None)
            }
        }
    }

    /// Reads an entry, discarding it if its length does not match the ref.
    fn read_entry(&self, dir: &Path, key: &str, r: &SampleRef) -> Result<Option<Vec<u8>>> {
        let path = Self::entry_path(dir, key);
        match fs::read(&path) {
            Ok(data) if data.len() as u64 == r.length => Ok(Some(data)),
            Ok(data) => {
                bump(&self.counters.corrupt_entries);
                log::warn!(
                    "cache entry {key} has {} bytes, expected {}; refetching",
                    data.len(),
                    r.length
                );
                let _ = fs::remove_file(&path);
                if dir == self.config.local_dir {
                    self.adjust_size(-(data.len() as i64));
                }
                Ok(None)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path.display().to_string(), e)),
        }
    }

    fn insert_local(&self, key: &str, data: &[u8]) -> Result<()> {
        let replaced = write_entry(&self.config.local_dir, key, data)?;
        self.adjust_size(data.len() as i64 - replaced as i64);
        self.touch(key);
        Ok(())
    }

    fn adjust_size(&self, delta: i64) {
        let mut size = self.local_size.lock().unwrap();
        let current = match *size {
            Some(s) => s,
            None => scan_objects(&self.config.local_dir).iter().map(|(_, n)| n).sum(),
        };
        // A fresh scan already sees the change.
        let next = if size.is_none() {
            current
        } else {
            (current as i64 + delta).max(0) as u64
        };
        *size = Some(next);
    }

    fn touch(&self, key: &str) {
        let _g = self.journal.lock().unwrap();
        let path = self.config.local_dir.join(JOURNAL);
        if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(path) {
            let _ = f.write_all(format!("{key}\n").as_bytes());
        }
    }

    /// Bytes currently stored in the local tier.
    pub fn local_size(&self) -> u64 {
        scan_objects(&self.config.local_dir).iter().map(|(_, n)| n).sum()
    }

    /// Keys currently in the local tier, sorted.
    pub fn local_keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = scan_objects(&self.config.local_dir)
            .into_iter()
            .map(|(k, _)| k)
            .collect();
        keys.sort();
        keys
    }

    /// Removes least-recently-used local entries until the tier fits its cap.
    pub fn evict_to_limit(&self) -> Result<u64> {
        let _g = self.journal.lock().unwrap();
        let entries = scan_objects(&self.config.local_dir);
        let mut total: u64 = entries.iter().map(|(_, n)| n).sum();
        if total <= self.config.max_local_bytes {
            *self.local_size.lock().unwrap() = Some(total);
            return Ok(0);
        }
        let journal_path = self.config.local_dir.join(JOURNAL);
        let journal = fs::read_to_string(&journal_path).unwrap_or_default();
        let mut last_use: HashMap<&str, usize> = HashMap::new();
        for (i, line) in journal.lines().enumerate() {
            last_use.insert(line.trim(), i + 1);
        }
        let mut order: Vec<(usize, &str, u64)> = entries
            .iter()
            .map(|(k, n)| (last_use.get(k.as_str()).copied().unwrap_or(0), k.as_str(), *n))
            .collect();
        order.sort_unstable();

        let mut freed = 0;
        let mut survivors = Vec::new();
        for (rank, key, size) in order {
            if total > self.config.max_local_bytes {
                let path = Self::entry_path(&self.config.local_dir, key);
                match fs::remove_file(&path) {
                    Ok(()) => {}
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                    Err(e) => return Err(Error::io(path.display().to_string(), e)),
                }
                total -= size;
                freed += size;
            } else {
                survivors.push((rank, key));
            }
        }
        let mut compacted = String::new();
        for (_, key) in survivors {
            compacted.push_str(key);
            compacted.push('\n');
        }
        let tmp = journal_path.with_extension(format!("tmp-{}", std::process::id()));
        fs::write(&tmp, compacted).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        fs::rename(&tmp, &journal_path).map_err(|e| Error::io(journal_path.display().to_string(), e))?;
        *self.local_size.lock().unwrap() = Some(total);
        self.counters.evicted_bytes.fetch_add(freed, Ordering::Relaxed);
        Ok(freed)
    }
}

/// Publishes an entry with temp-file + rename. Returns the size of any
/// entry it replaced.
fn write_entry(dir: &Path, key: &str, data: &[u8]) -> Result<u64> {
    let path = Cache::entry_path(dir, key);
    let parent = path.parent().expect("entry path has a parent");
    fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    let replaced = fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    let tmp = parent.join(format!(".{key}.{}.{}", std::process::id(), unique()));
    fs::write(&tmp, data).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(replaced)
}

fn unique() -> u64 {
    static NEXT: AtomicU64 = AtomicU64::new(0);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

/// `(key, size)` for every published entry under `dir/objects`.
fn scan_objects(dir: &Path) -> Vec<(String, u64)> {
    let mut out = Vec::new();
    let Ok(level1) = fs::read_dir(dir.join("objects")) else {
        return out;
    };
    for a in level1.flatten() {
        let Ok(level2) = fs::read_dir(a.path()) else { continue };
        for b in level2.flatten() {
            let Ok(files) = fs::read_dir(b.path()) else { continue };
            for f in files.flatten() {
                let name = f.file_name().to_string_lossy().into_owned();
                if name.starts_with('.') {
                    continue;
                }
                if let Ok(m) = f.metadata() {
                    if m.is_file() {
                        out.push((name, m.len()));
                    }
                }
            }
        }
    }
    out
}

/// Fetches payloads straight from storage, coalescing per source object.
pub fn fetch_direct(storage: &Storage, refs: &[SampleRef]) -> Result<Vec<Vec<u8>>> {
    let mut out = vec![Vec::new(); refs.len()];
    let mut by_uri: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in refs.iter().enumerate() {
        if r.length > 0 {
            by_uri.entry(r.source_uri.as_str()).or_default().push(i);
        }
    }
    for (uri, idxs) in by_uri {
        let source = SourceUri::parse(uri)?;
        let ranges = idxs
            .iter()
            .map(|&i| ByteRange::new(refs[i].offset, refs[i].length))
            .collect::<Result<Vec<_>>>()?;
        for (&i, data) in idxs.iter().zip(storage.read_ranges(&source, &ranges)?) {
            out[i] = data;
        }
    }
    Ok(out)
}

/// Where sample bytes come from: through a cache or straight from storage.
#[derive(Debug, Clone)]
pub enum SampleSource {
    Direct(Storage),
    Cached(Arc<Cache>),
}

impl SampleSource {
    pub fn fetch(&self, refs: &[SampleRef]) -> Result<Vec<Vec<u8>>> {
        match self {
            SampleSource::Direct(s) => fetch_direct(s, refs),
            SampleSource::Cached(c) => c.get_or_fetch_many(refs),
        }
    }

    pub fn storage(&self) -> &Storage {
        match self {
            SampleSource::Direct(s) => s,
            SampleSource::Cached(c) => c.storage(),
        }
    }
}
