use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde_json::{Map, Value as Json};

use super::{Engine, OperationDescriptor, SidecarFormat, SourceSpec, StageKind};
use crate::archive::{index_tar_with, TarMember};
use crate::canonical::canonical_value;
use crate::error::{Error, Result};
use crate::storage::{ByteRange, SourceUri, Storage};
use crate::table::{
    ColumnType, ColumnVector, Dataset, Field, SampleRef, Schema, Value, REF_LENGTH,
    REF_MEMBER_PATH, REF_OFFSET, REF_SOURCE_URI, UID,
};

/// One archive plus the sidecar holding its metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EtlSource {
    pub archive: String,
    pub sidecar: Option<String>,
    pub format: Option<SidecarFormat>,
}

impl EtlSource {
    pub fn new(archive: impl Into<String>, sidecar: Option<String>) -> Self {
        EtlSource {
            archive: archive.into(),
            sidecar,
            format: None,
        }
    }

    fn sidecar_format(&self) -> SidecarFormat {
        self.format.unwrap_or_else(|| match &self.sidecar {
            Some(s) if s.to_ascii_lowercase().ends_with(".csv") => SidecarFormat::Csv,
            _ => SidecarFormat::Jsonl,
        })
    }
}

/// The ETL descriptor: normalized URIs plus the observed object sizes, so a
/// replaced source produces a new fingerprint without reading any payload.
pub fn etl_descriptor(storage: &Storage, sources: &[EtlSource], coerce_text: bool) -> Result<OperationDescriptor> {
    let mut d = OperationDescriptor::new(StageKind::Etl);
    for s in sources {
        let archive = SourceUri::from_arg(&s.archive)?;
        let archive_size = storage.stat(&archive)?;
        let (sidecar, sidecar_size, format) = match &s.sidecar {
            Some(sc) => {
                let uri = SourceUri::from_arg(sc)?;
                let size = storage.stat(&uri)?;
                (Some(uri.as_str().to_string()), Some(size), Some(s.sidecar_format()))
            }
            None => (None, None, None),
        };
        d.sources.push(SourceSpec {
            archive: archive.as_str().to_string(),
            sidecar,
            format,
            archive_size,
            sidecar_size,
        });
    }
    if coerce_text {
        d.coerce_text = Some(true);
    }
    Ok(d)
}

/// Join key of a member: basename without its final extension.
fn join_key(member_path: &str) -> &str {
    let base = member_path.rsplit('/').next().unwrap_or(member_path);
    match base.rsplit_once('.') {
        Some((stem, _)) if !stem.is_empty() => stem,
        _ => base,
    }
}

fn is_metadata_member(path: &str) -> bool {
    path.to_ascii_lowercase().ends_with(".json")
}

struct MetaRow {
    key: String,
    fields: Map<String, Json>,
}

fn read_object(storage: &Storage, uri: &SourceUri) -> Result<Vec<u8>> {
    let size = storage.stat(uri)?;
    if size == 0 {
        return Ok(Vec::new());
    }
    storage.read_range(uri, ByteRange::new(0, size)?)
}

fn row_key(uri: &str, fields: &mut Map<String, Json>, where_: &str) -> Result<String> {
    let bad = |reason: String| Error::BadSidecar {
        uri: uri.to_string(),
        reason,
    };
    match fields.remove("key") {
        Some(Json::String(s)) => Ok(s),
        Some(Json::Number(n)) if n.is_i64() || n.is_u64() => Ok(n.to_string()),
        Some(other) => Err(bad(format!("{where_}: key must be a string, got {other}"))),
        None => Err(bad(format!("{where_}: missing \"key\" field"))),
    }
}

fn parse_jsonl(uri: &str, bytes: &[u8]) -> Result<Vec<MetaRow>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::BadSidecar {
        uri: uri.to_string(),
        reason: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let where_ = format!("line {}", n + 1);
        let mut fields = match serde_json::from_str::<Json>(line) {
            Ok(Json::Object(m)) => m,
            Ok(_) => {
                return Err(Error::BadSidecar {
                    uri: uri.to_string(),
                    reason: format!("{where_}: not a JSON object"),
                })
            }
            Err(e) => {
                return Err(Error::BadSidecar {
                    uri: uri.to_string(),
                    reason: format!("{where_}: {e}"),
                })
            }
        };
        let key = row_key(uri, &mut fields, &where_)?;
        rows.push(MetaRow { key, fields });
    }
    Ok(rows)
}

/// Types a CSV cell with the same vocabulary JSONL values have.
fn csv_cell(cell: &str) -> Json {
    let t = cell.trim();
    if t.is_empty() {
        return Json::Null;
    }
    match t {
        "true" => return Json::Bool(true),
        "false" => return Json::Bool(false),
        _ => {}
    }
    if let Ok(i) = t.parse::<i64>() {
        return Json::from(i);
    }
    if let Ok(f) = t.parse::<f64>() {
        if let Some(n) = serde_json::Number::from_f64(f) {
            return Json::Number(n);
        }
    }
    if t.starts_with('[') {
        if let Ok(v @ Json::Array(_)) = serde_json::from_str(t) {
            return v;
        }
    }
    Json::String(cell.to_string())
}

fn parse_csv(uri: &str, bytes: &[u8]) -> Result<Vec<MetaRow>> {
    let bad = |reason: String| Error::BadSidecar {
        uri: uri.to_string(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let mut rows = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let mut fields = Map::new();
        for (h, cell) in headers.iter().zip(record.iter()) {
            let v = if h == "key" {
                Json::String(cell.to_string())
            } else {
                csv_cell(cell)
            };
            fields.insert(h.to_string(), v);
        }
        let key = row_key(uri, &mut fields, &format!("record {}", n + 1))?;
        rows.push(MetaRow { key, fields });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Class {
    Int,
    Float,
    Bool,
    Text,
    Vector(usize),
    Other,
}

fn classify(v: &Json) -> Class {
    match v {
        Json::Number(n) if n.is_i64() => Class::Int,
        Json::Number(_) => Class::Float,
        Json::Bool(_) => Class::Bool,
        Json::String(_) => Class::Text,
        Json::Array(items) if !items.is_empty() && items.iter().all(Json::is_number) => {
            Class::Vector(items.len())
        }
        _ => Class::Other,
    }
}

/// Column type for the non-null values of one sidecar field.
///
/// Integers widen to float64 when any value is fractional; any other mixture
/// is a conflict unless `coerce_text` is set, in which case the field becomes
/// text. A field with no values at all is text.
pub fn infer_type(field: &str, values: &[&Json], coerce_text: bool) -> Result<ColumnType> {
    let classes: BTreeSet<_> = values
        .iter()
        .filter(|v| !v.is_null())
        .map(|v| match classify(v) {
            Class::Vector(_) => Class::Vector(0),
            c => c,
        })
        .collect();
    let ty = match classes.iter().copied().collect::<Vec<_>>().as_slice() {
        [] => Some(ColumnType::Utf8),
        [Class::Int] => Some(ColumnType::Int64),
        [Class::Float] | [Class::Int, Class::Float] => Some(ColumnType::Float64),
        [Class::Bool] => Some(ColumnType::Bool),
        [Class::Text] => Some(ColumnType::Utf8),
        [Class::Vector(_)] => {
            let dims: BTreeSet<usize> = values
                .iter()
                .filter_map(|v| v.as_array().map(Vec::len))
                .collect();
            if dims.len() > 1 {
                if coerce_text {
                    return Ok(ColumnType::Utf8);
                }
                return Err(Error::RaggedVector(field.to_string()));
            }
            let dim = *dims.iter().next().expect("non-empty");
            Some(ColumnType::FVec(u32::try_from(dim).map_err(|_| {
                Error::RaggedVector(field.to_string())
            })?))
        }
        _ => None,
    };
    match ty {
        Some(t) => Ok(t),
        None if coerce_text => Ok(ColumnType::Utf8),
        None => Err(Error::SchemaConflict {
            field: field.to_string(),
            detail: format!("values are a mix of {classes:?}"),
        }),
    }
}

fn to_value(v: &Json, ty: ColumnType) -> Value {
    match (ty, v) {
        (_, Json::Null) => Value::Null,
        (ColumnType::Utf8, Json::String(s)) => Value::Text(s.clone()),
        (ColumnType::Utf8, other) => Value::Text(canonical_value(other)),
        (ColumnType::Int64, v) => v.as_i64().map_or(Value::Null, Value::Int),
        (ColumnType::Float64, v) => v.as_f64().map_or(Value::Null, Value::Float),
        (ColumnType::Bool, v) => v.as_bool().map_or(Value::Null, Value::Bool),
        (ColumnType::FVec(_), Json::Array(items)) => {
            Value::FVec(items.iter().map(|x| x.as_f64().unwrap_or(0.0) as f32).collect())
        }
        _ => Value::Null,
    }
}

struct Sample {
    source: usize,
    member: TarMember,
}

impl Engine {
    /// Builds the base table: one row per non-`.json` member of every
    /// archive, joined to its sidecar row or in-archive `<key>.json` member.
    pub fn etl_build(&self, sources: &[EtlSource], coerce_text: bool) -> Result<Dataset> {
        let storage = self.storage();
        let descriptor = etl_descriptor(storage, sources, coerce_text)?;

        let mut samples: Vec<Sample> = Vec::new();
        // (source index, key) → metadata from inside that archive.
        let mut inline_meta: Vec<(usize, MetaRow)> = Vec::new();
        let mut uris = Vec::with_capacity(sources.len());
        for (si, spec) in descriptor.sources.iter().enumerate() {
            let uri = SourceUri::parse(&spec.archive)?;
            let members = index_tar_with(storage, &uri, self.config.index)?;
            let (meta, data): (Vec<_>, Vec<_>) = members
                .into_iter()
                .partition(|m| is_metadata_member(&m.member_path));
            if !meta.is_empty() {
                let ranges: Vec<ByteRange> = meta.iter().filter_map(TarMember::range).collect();
                let nonempty: Vec<&TarMember> = meta.iter().filter(|m| m.data_length > 0).collect();
                let payloads = storage.read_ranges(&uri, &ranges)?;
                for (m, bytes) in nonempty.into_iter().zip(payloads) {
                    let mut fields = match serde_json::from_slice::<Json>(&bytes) {
                        Ok(Json::Object(o)) => o,
                        _ => {
                            return Err(Error::BadSidecar {
                                uri: format!("{}#{}", uri, m.member_path),
                                reason: "not a JSON object".into(),
                            })
                        }
                    };
                    fields.remove("key");
                    inline_meta.push((
                        si,
                        MetaRow {
                            key: join_key(&m.member_path).to_string(),
                            fields,
                        },
                    ));
                }
            }
            samples.extend(data.into_iter().map(|member| Sample { source: si, member }));
            uris.push(uri);
        }

        let mut attrs: Vec<Option<Map<String, Json>>> = vec![None; samples.len()];
        let attach = |attrs: &mut Vec<Option<Map<String, Json>>>, idx: usize, row: MetaRow| -> Result<()> {
            match &mut attrs[idx] {
                slot @ None => *slot = Some(row.fields),
                Some(existing) => {
                    for (k, v) in row.fields {
                        if existing.contains_key(&k) {
                            return Err(Error::DuplicateKey(row.key.clone()));
                        }
                        existing.insert(k, v);
                    }
                }
            }
            Ok(())
        };

        // Sidecar rows join against every archive sharing that sidecar.
        let mut scopes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (si, spec) in descriptor.sources.iter().enumerate() {
            if let Some(sc) = &spec.sidecar {
                scopes.entry(sc.as_str()).or_default().push(si);
            }
        }
        for (sidecar, members_of) in &scopes {
            let uri = SourceUri::parse(sidecar)?;
            let bytes = read_object(storage, &uri)?;
            let format = descriptor.sources[members_of[0]].format.unwrap_or(SidecarFormat::Jsonl);
            let rows = match format {
                SidecarFormat::Jsonl => parse_jsonl(sidecar, &bytes)?,
                SidecarFormat::Csv => parse_csv(sidecar, &bytes)?,
            };
            let index = key_index(&samples, |s| members_of.contains(&s.source));
            let mut seen = BTreeSet::new();
            for row in rows {
                if !seen.insert(row.key.clone()) {
                    return Err(Error::DuplicateKey(row.key));
                }
                let idx = resolve_key(&index, &row.key)?;
                attach(&mut attrs, idx, row)?;
            }
        }
        let mut per_source: BTreeMap<usize, Vec<MetaRow>> = BTreeMap::new();
        for (si, row) in inline_meta {
            per_source.entry(si).or_default().push(row);
        }
        for (si, rows) in per_source {
            let index = key_index(&samples, |s| s.source == si);
            for row in rows {
                let idx = resolve_key(&index, &row.key)?;
                attach(&mut attrs, idx, row)?;
            }
        }

        let mut names: BTreeSet<&str> = BTreeSet::new();
        for fields in attrs.iter().flatten() {
            names.extend(fields.keys().map(String::as_str));
        }
        let mut fields = Vec::new();
        let mut attr_columns = Vec::new();
        for name in names {
            let values: Vec<&Json> = attrs
                .iter()
                .map(|a| a.as_ref().and_then(|m| m.get(name)).unwrap_or(&Json::Null))
                .collect();
            let ty = infer_type(name, &values, coerce_text)?;
            let cells: Vec<Value> = values.iter().map(|v| to_value(v, ty)).collect();
            fields.push(Field::new(name, ty, true));
            attr_columns.push(ColumnVector::from_values(ty, true, &cells)?);
        }
        let schema = Schema::with_attributes(fields).map_err(|e| match e {
            Error::BadSchema(reason) => Error::BadSidecar {
                uri: "sidecar".into(),
                reason,
            },
            other => other,
        })?;

        let refs: Vec<SampleRef> = samples
            .iter()
            .map(|s| SampleRef {
                source_uri: uris[s.source].as_str().to_string(),
                member_path: s.member.member_path.clone(),
                offset: s.member.data_offset,
                length: s.member.data_length,
            })
            .collect();
        let text = |f: &dyn Fn(&SampleRef) -> String| -> Vec<Value> {
            refs.iter().map(|r| Value::Text(f(r))).collect()
        };
        let int = |f: &dyn Fn(&SampleRef) -> u64| -> Vec<Value> {
            refs.iter().map(|r| Value::Int(f(r) as i64)).collect()
        };
        let mut columns = vec![
            ColumnVector::from_values(ColumnType::Utf8, false, &text(&|r| r.uid()))?,
            ColumnVector::from_values(ColumnType::Utf8, false, &text(&|r| r.source_uri.clone()))?,
            ColumnVector::from_values(ColumnType::Utf8, false, &text(&|r| r.member_path.clone()))?,
            ColumnVector::from_values(ColumnType::Int64, false, &int(&|r| r.offset))?,
            ColumnVector::from_values(ColumnType::Int64, false, &int(&|r| r.length))?,
        ];
        debug_assert_eq!(
            [UID, REF_SOURCE_URI, REF_MEMBER_PATH, REF_OFFSET, REF_LENGTH].len(),
            columns.len()
        );
        columns.extend(attr_columns);
        let origins = vec![None; columns.len()];
        Dataset::new(schema, columns, origins, Vec::new(), descriptor)
    }
}

/// Join key → sample index for the samples selected by `include`. Keys
/// shared by several samples map to `None` and fail only when used.
fn key_index<'a>(samples: &'a [Sample], include: impl Fn(&Sample) -> bool) -> HashMap<&'a str, Option<usize>> {
    let mut index: HashMap<&str, Option<usize>> = HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        if include(s) {
            index
                .entry(join_key(&s.member.member_path))
                .and_modify(|slot| *slot = None)
                .or_insert(Some(i));
        }
    }
    index
}

fn resolve_key(index: &HashMap<&str, Option<usize>>, key: &str) -> Result<usize> {
    match index.get(key) {
        Some(Some(i)) => Ok(*i),
        Some(None) => Err(Error::DuplicateKey(key.to_string())),
        None => Err(Error::JoinKeyMissing(key.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn infer(values: &[Json]) -> Result<ColumnType> {
        let refs: Vec<&Json> = values.iter().collect();
        infer_type("f", &refs, false)
    }

    #[test]
    fn inference_rules() {
        assert_eq!(infer(&[json!(1), json!(2), json!(3)]).unwrap(), ColumnType::Int64);
        assert_eq!(infer(&[json!(1), json!(2.5)]).unwrap(), ColumnType::Float64);
        assert_eq!(infer(&[json!(true), Json::Null]).unwrap(), ColumnType::Bool);
        assert_eq!(infer(&[json!("a")]).unwrap(), ColumnType::Utf8);
        assert_eq!(infer(&[Json::Null]).unwrap(), ColumnType::Utf8);
        let v = json!(vec![0.1; 64]);
        assert_eq!(infer(&[v.clone(), v]).unwrap(), ColumnType::FVec(64));
        assert!(matches!(
            infer(&[json!([1.0]), json!([1.0, 2.0])]),
            Err(Error::RaggedVector(_))
        ));
        assert!(matches!(
            infer(&[json!(1), json!("x")]),
            Err(Error::SchemaConflict { .. })
        ));
        let refs = [json!(1), json!("x")];
        let refs: Vec<&Json> = refs.iter().collect();
        assert_eq!(infer_type("f", &refs, true).unwrap(), ColumnType::Utf8);
    }

    #[test]
    fn csv_cells() {
        assert_eq!(csv_cell(""), Json::Null);
        assert_eq!(csv_cell("12"), json!(12));
        assert_eq!(csv_cell("1.5"), json!(1.5));
        assert_eq!(csv_cell("true"), json!(true));
        assert_eq!(csv_cell("[1, 2]"), json!([1, 2]));
        assert_eq!(csv_cell("a cat"), json!("a cat"));
    }

    #[test]
    fn join_keys() {
        assert_eq!(join_key("dir/a.jpg"), "a");
        assert_eq!(join_key("a.tar.gz"), "a.tar");
        assert_eq!(join_key("noext"), "noext");
    }
}
