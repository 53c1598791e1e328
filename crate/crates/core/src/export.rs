//! Deterministic, shard-aware export manifests and loader materialization.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value as Json};

use crate::cache::SampleSource;
use crate::canonical::{canonical_value, sha256_hex};
use crate::error::{Error, Result};
use crate::storage::RequestStats;
use crate::table::{Dataset, SampleRef, Value};

#[derive(Debug, Clone, PartialEq)]
pub struct ExportRow {
    pub uid: String,
    pub sample: SampleRef,
    pub attrs: Vec<(String, Value)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportManifest {
    pub dataset: String,
    pub fingerprint: String,
    pub seed: u64,
    pub rank: u32,
    pub world: u32,
    pub columns: Vec<String>,
    pub rows: Vec<ExportRow>,
}

/// Position key of a row in the shuffled order.
pub fn shuffle_key(seed: u64, uid: &str) -> String {
    let mut buf = seed.to_string().into_bytes();
    buf.push(0);
    buf.extend_from_slice(uid.as_bytes());
    sha256_hex(&buf)
}

/// Rows ordered by `shuffle_key(seed, uid)`; row `i` of that order belongs
/// to shard `i mod world`.
pub fn export(
    ds: &Dataset,
    label: &str,
    columns: &[String],
    seed: u64,
    rank: u32,
    world: u32,
) -> Result<ExportManifest> {
    if world == 0 || rank >= world {
        return Err(Error::BadShard { rank, world });
    }
    let col_idx = columns
        .iter()
        .map(|c| {
            ds.schema()
                .index_of(c)
                .ok_or_else(|| Error::UnknownColumn(c.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<(String, usize)> = (0..ds.row_count())
        .map(|r| (shuffle_key(seed, ds.uid(r)), r))
        .collect();
    order.sort();
    let rows = order
        .into_iter()
        .enumerate()
        .filter(|(i, _)| (*i as u64) % world as u64 == rank as u64)
        .map(|(_, (_, r))| ExportRow {
            uid: ds.uid(r).to_string(),
            sample: ds.sample_ref(r),
            attrs: columns
                .iter()
                .zip(&col_idx)
                .map(|(c, &i)| (c.clone(), ds.columns()[i].value(r)))
                .collect(),
        })
        .collect();
    Ok(ExportManifest {
        dataset: label.to_string(),
        fingerprint: ds.fingerprint.clone(),
        seed,
        rank,
        world,
        columns: columns.to_vec(),
        rows,
    })
}

impl ExportManifest {
    /// One header line, then one canonical JSON object per row.
    pub fn to_jsonl(&self) -> String {
        let mut out = canonical_value(&json!({
            "type": "header",
            "dataset": self.dataset,
            "fingerprint": self.fingerprint,
            "seed": self.seed,
            "rank": self.rank,
            "world": self.world,
            "columns": self.columns,
            "row_count": self.rows.len(),
        }));
        out.push('\n');
        for row in &self.rows {
            let attrs: serde_json::Map<String, Json> = row
                .attrs
                .iter()
                .map(|(k, v)| (k.clone(), v.to_json()))
                .collect();
            out.push_str(&canonical_value(&json!({
                "uid": row.uid,
                "source_uri": row.sample.source_uri,
                "member_path": row.sample.member_path,
                "offset": row.sample.offset,
                "length": row.sample.length,
                "attrs": attrs,
            })));
            out.push('\n');
        }
        out
    }

    /// Reads the sample pointers back from an export file. Attribute values
    /// are kept as JSON text.
    pub fn refs_from_jsonl(text: &str) -> Result<Vec<(String, SampleRef)>> {
        let bad = |n: usize, why: String| Error::BadArgument(format!("export line {}: {why}", n + 1));
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v: Json = serde_json::from_str(line).map_err(|e| bad(n, e.to_string()))?;
            if v.get("type").and_then(Json::as_str) == Some("header") {
                continue;
            }
            let s = |k: &str| v.get(k).and_then(Json::as_str).map(str::to_string);
            let u = |k: &str| v.get(k).and_then(Json::as_u64);
            let (Some(uid), Some(source_uri), Some(member_path), Some(offset), Some(length)) = (
                s("uid"),
                s("source_uri"),
                s("member_path"),
                u("offset"),
                u("length"),
            ) else {
                return Err(bad(n, "missing sample pointer fields".into()));
            };
            let sample = SampleRef {
                source_uri,
                member_path,
                offset,
                length,
            };
            if sample.uid() != uid {
                return Err(bad(n, format!("uid {uid} does not match its pointer")));
            }
            out.push((uid, sample));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FetchReport {
    pub rows: u64,
    pub bytes: u64,
    pub requests: RequestStats,
}

/// Rows fetched per round trip through the cache.
const FETCH_CHUNK: usize = 512;

/// Writes every sample to `<out>/<uid>` plus `<out>/index.jsonl`.
pub fn fetch_to_dir(source: &SampleSource, refs: &[(String, SampleRef)], out: &Path) -> Result<FetchReport> {
    fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let before = source.storage().stats();
    let mut index = String::new();
    let mut report = FetchReport::default();
    for chunk in refs.chunks(FETCH_CHUNK) {
        let samples: Vec<SampleRef> = chunk.iter().map(|(_, r)| r.clone()).collect();
        let payloads = source.fetch(&samples)?;
        for ((uid, r), data) in chunk.iter().zip(payloads) {
            let path = out.join(uid);
            fs::write(&path, &data).map_err(|e| Error::io(path.display().to_string(), e))?;
            report.rows += 1;
            report.bytes += data.len() as u64;
            let mut entry = BTreeMap::new();
            entry.insert("uid", json!(uid));
            entry.insert("member_path", json!(r.member_path));
            entry.insert("length", json!(r.length));
            index.push_str(&canonical_value(&json!(entry)));
            index.push('\n');
        }
    }
    let index_path = out.join("index.jsonl");
    let mut f = fs::File::create(&index_path).map_err(|e| Error::io(index_path.display().to_string(), e))?;
    f.write_all(index.as_bytes())
        .map_err(|e| Error::io(index_path.display().to_string(), e))?;
    report.requests = source.storage().stats().since(&before);
    Ok(report)
}

/// Every row's pointer, in table order.
pub fn dataset_refs(ds: &Dataset) -> Vec<(String, SampleRef)> {
    (0..ds.row_count())
        .map(|r| (ds.uid(r).to_string(), ds.sample_ref(r)))
        .collect()
}
