//! Named, immutable dataset versions on a local directory tree.
//!
//! ```text
//! <root>/catalog.json                       name -> [(version, fingerprint)]
//! <root>/datasets/<name>/v<k>/manifest.json
//! <root>/datasets/<name>/v<k>/columns/<column>.col
//! <root>/provenance/<fingerprint>.json      one node per dataset, saved or not
//! <root>/.lock                              single-writer lock
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::canonical::{sha256_hex, to_canonical_integral, to_canonical_string};
use crate::engine::{OperationDescriptor, StageKind};
use crate::error::{Error, Result};
use crate::table::{
    decode_column, encode_column, read_manifest, write_manifest, Dataset, DatasetManifest,
    Schema,
};

pub const CATALOG_FILE: &str = "catalog.json";
pub const LOCK_FILE: &str = ".lock";
pub const DEFAULT_LOCK_TIMEOUT: Duration = Duration::from_secs(30);

/// Content address of a dataset version.
///
/// Parents are hashed in the order given: union is order-sensitive, so
/// `union(a, b)` and `union(b, a)` are different datasets.
pub fn fingerprint(parents: &[String], descriptor: &OperationDescriptor, schema: &Schema) -> Result<String> {
    Ok(sha256_hex(fingerprint_input(parents, descriptor, schema)?.as_bytes()))
}

/// The exact bytes that [`fingerprint`] hashes.
pub fn fingerprint_input(
    parents: &[String],
    descriptor: &OperationDescriptor,
    schema: &Schema,
) -> Result<String> {
    #[derive(Serialize)]
    struct Input<'a> {
        descriptor: &'a OperationDescriptor,
        parents: &'a [String],
        schema: &'a Schema,
    }
    to_canonical_integral(&Input {
        descriptor,
        parents,
        schema,
    })
}

/// A dataset name must not end in `.v<digits>`, which is reserved for the
/// `name.vK` reference form.
pub fn is_valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    let Some(first) = chars.next() else {
        return false;
    };
    if !first.is_ascii_alphanumeric() || name.len() > 128 {
        return false;
    }
    if !name
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
    {
        return false;
    }
    split_dot_version(name).is_none()
}

fn split_dot_version(s: &str) -> Option<(&str, u32)> {
    let (base, v) = s.rsplit_once(".v")?;
    if base.is_empty() || v.is_empty() || !v.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((base, v.parse().ok()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VersionSel {
    Latest,
    Exact(u32),
}

/// `name`, `name@latest`, `name@3` or `name.v3`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VersionRef {
    pub name: String,
    pub version: VersionSel,
}

impl VersionRef {
    pub fn latest(name: impl Into<String>) -> Self {
        VersionRef {
            name: name.into(),
            version: VersionSel::Latest,
        }
    }

    pub fn exact(name: impl Into<String>, version: u32) -> Self {
        VersionRef {
            name: name.into(),
            version: VersionSel::Exact(version),
        }
    }
}

impl FromStr for VersionRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::BadName(s.to_string());
        let (name, version) = if let Some((name, v)) = s.split_once('@') {
            let sel = if v == "latest" {
                VersionSel::Latest
            } else {
                VersionSel::Exact(v.parse().map_err(|_| bad())?)
            };
            (name, sel)
        } else if let Some((name, v)) = split_dot_version(s) {
            (name, VersionSel::Exact(v))
        } else {
            (s, VersionSel::Latest)
        };
        if !is_valid_name(name) || version == VersionSel::Exact(0) {
            return Err(bad());
        }
        Ok(VersionRef {
            name: name.to_string(),
            version,
        })
    }
}

impl fmt::Display for VersionRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.version {
            VersionSel::Latest => write!(f, "{}@latest", self.name),
            VersionSel::Exact(v) => write!(f, "{}.v{v}", self.name),
        }
    }
}

/// One vertex of the provenance DAG.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceNode {
    pub fingerprint: String,
    pub parents: Vec<String>,
    pub descriptor: OperationDescriptor,
    pub schema: Schema,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Index {
    format: u32,
    datasets: BTreeMap<String, Vec<IndexEntry>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct IndexEntry {
    version: u32,
    fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParentInfo {
    pub fingerprint: String,
    /// `(name, version)` when the parent is a named version.
    pub named: Option<(String, u32)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub name: String,
    pub version: u32,
    pub fingerprint: String,
    pub kind: StageKind,
    pub parents: Vec<ParentInfo>,
    pub row_count: u64,
    pub created_at: String,
}

/// Held while writing; removes the lock file on drop.
#[derive(Debug)]
pub struct CatalogLock {
    path: PathBuf,
}

impl Drop for CatalogLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone)]
pub struct Catalog {
    root: PathBuf,
    lock_timeout: Duration,
}

impl Catalog {
    /// Creates a catalog skeleton in an absent or empty directory.
    pub fn init(root: impl AsRef<Path>) -> Result<Catalog> {
        let root = root.as_ref().to_path_buf();
        match fs::read_dir(&root) {
            Ok(mut entries) => {
                if entries.next().is_some() {
                    return Err(Error::NonEmptyDir(root));
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(Error::io(root.display().to_string(), e)),
        }
        for dir in [root.join("datasets"), root.join("provenance")] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
        let catalog = Catalog {
            root,
            lock_timeout: DEFAULT_LOCK_TIMEOUT,
        };
        catalog.write_index(&Index {
            format: 1,
            datasets: BTreeMap::new(),
        })?;
        Ok(catalog)
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Catalog> {
        let root = root.as_ref().to_path_buf();
        if !root.join(CATALOG_FILE).is_file() {
            return Err(Error::NoCatalog(root));
        }
        Ok(Catalog {
            root,
            lock_timeout: DEFAULT_LOCK_TIMEOUT,
        })
    }

    pub fn with_lock_timeout(mut self, timeout: Duration) -> Self {
        self.lock_timeout = timeout;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Takes the single-writer lock, waiting up to the configured timeout.
    pub fn lock(&self) -> Result<CatalogLock> {
        let path = self.root.join(LOCK_FILE);
        let deadline = Instant::now() + self.lock_timeout;
        loop {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(CatalogLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if Instant::now() >= deadline {
                        return Err(Error::CatalogLocked(path));
                    }
                    std::thread::sleep(Duration::from_millis(25));
                }
                Err(e) => return Err(Error::io(path.display().to_string(), e)),
            }
        }
    }

    fn read_index(&self) -> Result<Index> {
        let path = self.root.join(CATALOG_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::NoCatalog(self.root.clone()))
            }
            Err(e) => return Err(Error::io(path.display().to_string(), e)),
        };
        serde_json::from_str(&text).map_err(|e| Error::CorruptManifest {
            path,
            reason: e.to_string(),
        })
    }

    fn write_index(&self, index: &Index) -> Result<()> {
        write_atomic(&self.root.join(CATALOG_FILE), to_canonical_integral(index)?.as_bytes())
    }

    fn version_dir(&self, name: &str, version: u32) -> PathBuf {
        self.root.join("datasets").join(name).join(format!("v{version}"))
    }

    fn provenance_path(&self, fp: &str) -> PathBuf {
        self.root.join("provenance").join(format!("{fp}.json"))
    }

    /// Names with their version numbers, ascending.
    pub fn list(&self) -> Result<Vec<(String, Vec<u32>)>> {
        Ok(self
            .read_index()?
            .datasets
            .into_iter()
            .map(|(n, vs)| (n, vs.iter().map(|e| e.version).collect()))
            .collect())
    }

    pub fn resolve(&self, r: &VersionRef) -> Result<DatasetManifest> {
        let index = self.read_index()?;
        let version = resolve_in(&index, r)?;
        read_manifest(&self.version_dir(&r.name, version))
    }

    pub fn resolve_str(&self, r: &str) -> Result<DatasetManifest> {
        self.resolve(&r.parse()?)
    }

    /// All versions of `name`, oldest first.
    pub fn versions(&self, name: &str) -> Result<Vec<DatasetManifest>> {
        let index = self.read_index()?;
        let Some(entries) = index.datasets.get(name) else {
            return Ok(Vec::new());
        };
        entries
            .iter()
            .map(|e| read_manifest(&self.version_dir(name, e.version)))
            .collect()
    }

    /// The first named version published with fingerprint `fp`.
    pub fn find_by_fingerprint(&self, fp: &str) -> Result<Option<DatasetManifest>> {
        let index = self.read_index()?;
        match named_by_fingerprint(&index).get(fp) {
            Some((name, version)) => Ok(Some(read_manifest(&self.version_dir(name, *version))?)),
            None => Ok(None),
        }
    }

    /// Loads every column of a version into memory.
    pub fn load(&self, r: &VersionRef) -> Result<Dataset> {
        let m = self.resolve(r)?;
        self.load_manifest(&m)
    }

    pub fn load_manifest(&self, m: &DatasetManifest) -> Result<Dataset> {
        let mut columns = Vec::with_capacity(m.schema.len());
        let mut origins = Vec::with_capacity(m.schema.len());
        for f in m.schema.fields() {
            let rel = &m.column_files[&f.name];
            let path = self.root.join(rel);
            let bytes = fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
            let col = decode_column(&bytes)?;
            if col.column_type() != f.ty || col.len() as u64 != m.row_count {
                return Err(Error::InvariantViolation(format!(
                    "column file {rel} does not match manifest of {}.v{}",
                    m.name, m.version
                )));
            }
            columns.push(col);
            origins.push(Some(rel.clone()));
        }
        let mut ds = Dataset::new(
            m.schema.clone(),
            columns,
            origins,
            m.parents.clone(),
            m.operation.clone(),
        )?;
        if ds.fingerprint != m.fingerprint {
            return Err(Error::InvariantViolation(format!(
                "loaded {}.v{} fingerprint differs from manifest",
                m.name, m.version
            )));
        }
        ds.saved_as = Some((m.name.clone(), m.version));
        Ok(ds)
    }

    /// Saves `ds` under `name`. An existing version of `name` with the same
    /// fingerprint is returned as-is without writing anything.
    pub fn save(&self, ds: &Dataset, name: &str) -> Result<DatasetManifest> {
        if !is_valid_name(name) {
            return Err(Error::BadName(name.to_string()));
        }
        let _lock = self.lock()?;
        let mut index = self.read_index()?;
        let entries = index.datasets.entry(name.to_string()).or_default();
        if let Some(e) = entries.iter().find(|e| e.fingerprint == ds.fingerprint) {
            return read_manifest(&self.version_dir(name, e.version));
        }
        let version = entries.iter().map(|e| e.version).max().unwrap_or(0) + 1;

        let dataset_dir = self.root.join("datasets").join(name);
        fs::create_dir_all(&dataset_dir).map_err(|e| Error::io(dataset_dir.display().to_string(), e))?;
        let tmp = dataset_dir.join(format!(".tmp-v{version}-{}-{}", std::process::id(), nanos()));
        let result = self.write_version(ds, name, version, &tmp);
        let manifest = match result {
            Ok(m) => m,
            Err(e) => {
                let _ = fs::remove_dir_all(&tmp);
                return Err(e);
            }
        };
        let final_dir = self.version_dir(name, version);
        fs::rename(&tmp, &final_dir).map_err(|e| Error::io(final_dir.display().to_string(), e))?;

        for node in &ds.lineage {
            self.write_node(node, false)?;
        }
        let mut node = ds.provenance();
        node.name = Some(name.to_string());
        node.version = Some(version);
        self.write_node(&node, true)?;

        entries.push(IndexEntry {
            version,
            fingerprint: ds.fingerprint.clone(),
        });
        self.write_index(&index)?;
        Ok(manifest)
    }

    fn write_version(&self, ds: &Dataset, name: &str, version: u32, tmp: &Path) -> Result<DatasetManifest> {
        let cols = tmp.join("columns");
        fs::create_dir_all(&cols).map_err(|e| Error::io(cols.display().to_string(), e))?;
        let rel_prefix = format!("datasets/{name}/v{version}/columns");
        let mut column_files = BTreeMap::new();
        for ((f, col), origin) in ds.schema().fields().iter().zip(ds.columns()).zip(ds.origins()) {
            let rel = match origin {
                Some(rel) if self.root.join(rel).is_file() => rel.clone(),
                _ => {
                    let file = format!("{}.col", f.name);
                    let path = cols.join(&file);
                    fs::write(&path, encode_column(col))
                        .map_err(|e| Error::io(path.display().to_string(), e))?;
                    format!("{rel_prefix}/{file}")
                }
            };
            column_files.insert(f.name.clone(), rel);
        }
        let manifest = DatasetManifest {
            name: name.to_string(),
            version,
            fingerprint: ds.fingerprint.clone(),
            schema: ds.schema().clone(),
            row_count: ds.row_count() as u64,
            column_files,
            parents: ds.parents.clone(),
            operation: ds.operation.clone(),
            created_at: created_at(),
        };
        write_manifest(&manifest, tmp)?;
        Ok(manifest)
    }

    fn write_node(&self, node: &ProvenanceNode, overwrite: bool) -> Result<()> {
        let path = self.provenance_path(&node.fingerprint);
        if !overwrite && path.exists() {
            return Ok(());
        }
        if overwrite {
            // Keep the first name a fingerprint was published under.
            if let Ok(existing) = self.node(&node.fingerprint) {
                if existing.name.is_some() {
                    return Ok(());
                }
            }
        }
        let dir = self.root.join("provenance");
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        write_atomic(&path, to_canonical_integral(node)?.as_bytes())
    }

    /// Looks up a provenance node by fingerprint.
    pub fn node(&self, fp: &str) -> Result<ProvenanceNode> {
        let path = self.provenance_path(fp);
        let text = fs::read_to_string(&path).map_err(|_| Error::NotFound(format!("provenance node {fp}")))?;
        serde_json::from_str(&text).map_err(|e| Error::CorruptManifest {
            path,
            reason: e.to_string(),
        })
    }

    /// Versions of `name`, newest first, with their parent links.
    pub fn log(&self, name: &str) -> Result<Vec<LogEntry>> {
        let index = self.read_index()?;
        let entries = index
            .datasets
            .get(name)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::DatasetNotFound(name.to_string()))?;
        let by_fp = named_by_fingerprint(&index);
        let mut out = Vec::new();
        for e in entries.iter().rev() {
            let m = read_manifest(&self.version_dir(name, e.version))?;
            let parents = m
                .parents
                .iter()
                .map(|fp| ParentInfo {
                    fingerprint: fp.clone(),
                    named: by_fp.get(fp.as_str()).cloned(),
                })
                .collect();
            out.push(LogEntry {
                name: name.to_string(),
                version: m.version,
                fingerprint: m.fingerprint,
                kind: m.operation.kind,
                parents,
                row_count: m.row_count,
                created_at: m.created_at,
            });
        }
        Ok(out)
    }

    /// Latest named versions that are stale, parents before children.
    ///
    /// With `root`, only datasets derived from that name are considered.
    pub fn find_stale(&self, root: Option<&str>) -> Result<Vec<VersionRef>> {
        let index = self.read_index()?;
        let graph = StaleGraph::build(self, &index)?;
        let mut stale: Vec<(usize, String, u32)> = Vec::new();
        for (name, entries) in &index.datasets {
            let Some(latest) = entries.iter().max_by_key(|e| e.version) else {
                continue;
            };
            if let Some(r) = root {
                if !graph.named_ancestors(name).contains(r) {
                    continue;
                }
            }
            let effective = graph.effective(&latest.fingerprint, &mut HashSet::new())?;
            if effective != latest.fingerprint {
                stale.push((graph.depth(name, &mut HashSet::new()), name.clone(), latest.version));
            }
        }
        stale.sort();
        Ok(stale
            .into_iter()
            .map(|(_, n, v)| VersionRef::exact(n, v))
            .collect())
    }

    /// Deletes every version not reachable from `keep` through parent links
    /// and returns the bytes freed. Column files still referenced by a
    /// surviving manifest are kept.
    pub fn gc(&self, keep: &[VersionRef]) -> Result<u64> {
        let _lock = self.lock()?;
        let mut index = self.read_index()?;
        let by_fp = named_by_fingerprint(&index);

        let mut reachable: HashSet<(String, u32)> = HashSet::new();
        let mut seen_fp: HashSet<String> = HashSet::new();
        let mut stack: Vec<String> = Vec::new();
        for r in keep {
            let v = resolve_in(&index, r)?;
            let fp = entry_fp(&index, &r.name, v).expect("resolved");
            reachable.insert((r.name.clone(), v));
            stack.push(fp);
        }
        while let Some(fp) = stack.pop() {
            if !seen_fp.insert(fp.clone()) {
                continue;
            }
            let parents = match by_fp.get(fp.as_str()) {
                Some((n, v)) => read_manifest(&self.version_dir(n, *v))?.parents,
                None => self.node(&fp).map(|n| n.parents).unwrap_or_default(),
            };
            for p in parents {
                if let Some(named) = by_fp.get(p.as_str()) {
                    reachable.insert(named.clone());
                }
                stack.push(p);
            }
        }
        // A fingerprint saved under several names keeps all of them alive.
        for (name, entries) in &index.datasets {
            for e in entries {
                if seen_fp.contains(&e.fingerprint) {
                    reachable.insert((name.clone(), e.version));
                }
            }
        }

        let mut doomed = Vec::new();
        let mut referenced: HashSet<String> = HashSet::new();
        for (name, entries) in &index.datasets {
            for e in entries {
                let m = read_manifest(&self.version_dir(name, e.version))?;
                if reachable.contains(&(name.clone(), e.version)) {
                    referenced.extend(m.column_files.values().cloned());
                } else {
                    doomed.push(m);
                }
            }
        }
        if doomed.is_empty() {
            return Ok(0);
        }

        for m in &doomed {
            if let Some(entries) = index.datasets.get_mut(&m.name) {
                entries.retain(|e| e.version != m.version);
            }
        }
        index.datasets.retain(|_, v| !v.is_empty());
        self.write_index(&index)?;

        let mut freed = 0u64;
        for m in &doomed {
            let dir = self.version_dir(&m.name, m.version);
            freed += remove_unreferenced(&dir, &self.root, &referenced)?;
        }
        Ok(freed)
    }
}

/// Deletes everything under `dir` not in `referenced` (root-relative paths);
/// directories are removed once empty.
fn remove_unreferenced(dir: &Path, root: &Path, referenced: &HashSet<String>) -> Result<u64> {
    let mut freed = 0;
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(Error::io(dir.display().to_string(), e)),
    };
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = entry.path();
        if path.is_dir() {
            freed += remove_unreferenced(&path, root, referenced)?;
            continue;
        }
        let rel = path
            .strip_prefix(root)
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .unwrap_or_default();
        if referenced.contains(&rel) {
            continue;
        }
        let len = entry.metadata().map(|m| m.len()).unwrap_or(0);
        fs::remove_file(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        freed += len;
    }
    let _ = fs::remove_dir(dir);
    Ok(freed)
}

fn resolve_in(index: &Index, r: &VersionRef) -> Result<u32> {
    let entries = index
        .datasets
        .get(&r.name)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| Error::DatasetNotFound(r.to_string()))?;
    match r.version {
        VersionSel::Latest => Ok(entries.iter().map(|e| e.version).max().expect("non-empty")),
        VersionSel::Exact(v) if entries.iter().any(|e| e.version == v) => Ok(v),
        VersionSel::Exact(_) => Err(Error::DatasetNotFound(r.to_string())),
    }
}

fn entry_fp(index: &Index, name: &str, version: u32) -> Option<String> {
    index
        .datasets
        .get(name)?
        .iter()
        .find(|e| e.version == version)
        .map(|e| e.fingerprint.clone())
}

/// Fingerprint → first `(name, version)` it was published under.
fn named_by_fingerprint(index: &Index) -> HashMap<&str, (String, u32)> {
    let mut out = HashMap::new();
    for (name, entries) in &index.datasets {
        for e in entries {
            out.entry(e.fingerprint.as_str())
                .or_insert_with(|| (name.clone(), e.version));
        }
    }
    out
}

/// Provenance view used for staleness: every node reachable from a named
/// version, plus the latest fingerprint of each name.
struct StaleGraph {
    nodes: HashMap<String, ProvenanceNode>,
    latest: HashMap<String, String>,
}

impl StaleGraph {
    fn build(catalog: &Catalog, index: &Index) -> Result<Self> {
        let mut nodes = HashMap::new();
        let mut latest = HashMap::new();
        let mut stack = Vec::new();
        for (name, entries) in &index.datasets {
            for e in entries {
                stack.push(e.fingerprint.clone());
            }
            if let Some(e) = entries.iter().max_by_key(|e| e.version) {
                latest.insert(name.clone(), e.fingerprint.clone());
            }
        }
        while let Some(fp) = stack.pop() {
            if nodes.contains_key(&fp) {
                continue;
            }
            let node = match catalog.node(&fp) {
                Ok(n) => n,
                Err(_) => continue,
            };
            stack.extend(node.parents.iter().cloned());
            nodes.insert(fp, node);
        }
        Ok(StaleGraph { nodes, latest })
    }

    /// Fingerprint `fp` would have if recomputed against the latest version
    /// of every named ancestor.
    fn effective(&self, fp: &str, visiting: &mut HashSet<String>) -> Result<String> {
        let Some(node) = self.nodes.get(fp) else {
            return Ok(fp.to_string());
        };
        if node.parents.is_empty() || !visiting.insert(fp.to_string()) {
            return Ok(fp.to_string());
        }
        let mut parents = Vec::with_capacity(node.parents.len());
        for p in &node.parents {
            let target = match self.nodes.get(p).and_then(|n| n.name.as_ref()) {
                // A dataset derived from an older version of its own name
                // keeps that exact parent.
                Some(pname) if Some(pname) != node.name.as_ref() => {
                    self.latest.get(pname).cloned().unwrap_or_else(|| p.clone())
                }
                _ => p.clone(),
            };
            parents.push(self.effective(&target, visiting)?);
        }
        visiting.remove(fp);
        fingerprint(&parents, &node.descriptor, &node.schema)
    }

    fn parent_names(&self, fp: &str, out: &mut BTreeSet<String>, seen: &mut HashSet<String>) {
        let Some(node) = self.nodes.get(fp) else { return };
        for p in &node.parents {
            if !seen.insert(p.clone()) {
                continue;
            }
            match self.nodes.get(p).and_then(|n| n.name.clone()) {
                Some(n) => {
                    out.insert(n);
                }
                None => self.parent_names(p, out, seen),
            }
        }
    }

    fn direct_named_parents(&self, name: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        if let Some(fp) = self.latest.get(name) {
            self.parent_names(fp, &mut out, &mut HashSet::new());
        }
        out.remove(name);
        out
    }

    fn named_ancestors(&self, name: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack = vec![name.to_string()];
        while let Some(n) = stack.pop() {
            for p in self.direct_named_parents(&n) {
                if out.insert(p.clone()) {
                    stack.push(p);
                }
            }
        }
        out
    }

    fn depth(&self, name: &str, visiting: &mut HashSet<String>) -> usize {
        if !visiting.insert(name.to_string()) {
            return 0;
        }
        let d = self
            .direct_named_parents(name)
            .iter()
            .map(|p| self.depth(p, visiting) + 1)
            .max()
            .unwrap_or(0);
        visiting.remove(name);
        d
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp-{}-{}", std::process::id(), nanos()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn nanos() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0)
}

/// RFC 3339 UTC timestamp; `SOURCE_DATE_EPOCH` pins it for reproducible builds.
pub fn created_at() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .unwrap_or_else(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs() as i64)
                .unwrap_or(0)
        });
    chrono::DateTime::from_timestamp(secs, 0)
        .unwrap_or_default()
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Canonical text of a provenance node, for display.
pub fn node_json(node: &ProvenanceNode) -> Result<String> {
    to_canonical_string(node)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_refs() {
        assert!(is_valid_name("most-similar"));
        assert!(is_valid_name("laion5b"));
        assert!(!is_valid_name("laion5b.v1"));
        assert!(!is_valid_name("-x"));
        assert!(!is_valid_name("a/b"));
        assert!(!is_valid_name(""));

        let r: VersionRef = "laion5b.v1".parse().unwrap();
        assert_eq!(r, VersionRef::exact("laion5b", 1));
        let r: VersionRef = "laion5b@2".parse().unwrap();
        assert_eq!(r, VersionRef::exact("laion5b", 2));
        let r: VersionRef = "laion5b@latest".parse().unwrap();
        assert_eq!(r, VersionRef::latest("laion5b"));
        let r: VersionRef = "most-similar".parse().unwrap();
        assert_eq!(r, VersionRef::latest("most-similar"));
        assert!("x@0".parse::<VersionRef>().is_err());
        assert!("x@foo".parse::<VersionRef>().is_err());
    }

    #[test]
    fn timestamp_is_pinnable() {
        assert_eq!(
            chrono::DateTime::from_timestamp(0, 0)
                .unwrap()
                .to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            "1970-01-01T00:00:00Z"
        );
    }
}
