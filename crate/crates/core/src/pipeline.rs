//! JSON pipeline files and their staleness-aware execution.
//!
//! ```json
//! {"pipeline_version": 1, "stages": [
//!   {"save_as": "laion", "op": "etl",
//!    "sources": [{"archive": "data/shard-*.tar", "sidecar": "data/{stem}.jsonl"}]},
//!   {"save_as": "large", "op": "filter", "inputs": ["laion"], "expr": "size > 1000"}
//! ]}
//! ```
//!
//! Relative paths resolve against the pipeline file's directory. An archive
//! pattern containing `*` expands (sorted) at run time; `{stem}` in the
//! sidecar is replaced by each archive's file stem.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value as Json;

use crate::catalog::{is_valid_name, Catalog, VersionRef};
use crate::engine::{Engine, EtlSource, SidecarFormat, Stage, StageKind, UdfSpec};
use crate::error::{Error, Result};
use crate::expr::Params;
use crate::table::{ColumnType, DatasetManifest, Value};

pub const PIPELINE_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRepr {
    pipeline_version: u32,
    stages: Vec<StageRepr>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageRepr {
    save_as: String,
    op: StageKind,
    #[serde(default)]
    inputs: Vec<String>,
    #[serde(default)]
    sources: Vec<SourceRepr>,
    #[serde(default)]
    coerce_text: bool,
    expr: Option<String>,
    column: Option<String>,
    #[serde(default)]
    params: BTreeMap<String, Json>,
    udf: Option<UdfRepr>,
    key: Option<String>,
    #[serde(default)]
    descending: bool,
    limit: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceRepr {
    archive: String,
    sidecar: Option<String>,
    format: Option<SidecarFormat>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct UdfRepr {
    id: String,
    version: Option<String>,
    command: Option<Vec<String>>,
    /// `name:type` entries, e.g. `embed:fvec:64`.
    outputs: Option<Vec<String>>,
    /// Output column name for a builtin.
    column: Option<String>,
    #[serde(default)]
    inputs: Vec<String>,
    needs_sample_bytes: Option<bool>,
    batch_size: Option<u32>,
}

/// A validated pipeline stage.
#[derive(Debug, Clone)]
pub struct PipelineStage {
    pub save_as: String,
    pub inputs: Vec<String>,
    pub stage: Stage,
    /// ETL sources before pattern expansion.
    etl_patterns: Vec<SourceRepr>,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub stages: Vec<PipelineStage>,
    base_dir: PathBuf,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::BadPipeline(msg.into())
}

fn resolve_path(base: &Path, p: &str) -> String {
    if p.contains("://") || Path::new(p).is_absolute() {
        p.to_string()
    } else {
        base.join(p).to_string_lossy().into_owned()
    }
}

/// Parses `k=v` style text or a pipeline JSON value; `@path` reads a JSON
/// document (e.g. a vector) from a file.
pub fn param_from_json(base: &Path, name: &str, v: &Json) -> Result<Value> {
    let with_name = |e: Error| match e {
        Error::BadParam { reason, .. } => Error::BadParam {
            name: name.to_string(),
            reason,
        },
        other => other,
    };
    match v {
        Json::String(s) if s.starts_with('@') => load_param_file(&base.join(&s[1..]), name),
        Json::String(s) => Ok(Value::Text(s.clone())),
        other => Value::from_json_param(other).map_err(with_name),
    }
}

pub fn load_param_file(path: &Path, name: &str) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let json: Json = serde_json::from_str(&text).map_err(|e| Error::BadParam {
        name: name.to_string(),
        reason: format!("{}: {e}", path.display()),
    })?;
    Value::from_json_param(&json).map_err(|e| match e {
        Error::BadParam { reason, .. } => Error::BadParam {
            name: name.to_string(),
            reason,
        },
        other => other,
    })
}

/// `name:type` where type is `int64`, `fvec:64`, `fvec(64)`, ...
pub fn parse_output(s: &str) -> Result<(String, ColumnType)> {
    let (name, ty) = s
        .split_once(':')
        .ok_or_else(|| Error::BadArgument(format!("expected name:type, got {s:?}")))?;
    Ok((name.to_string(), ty.parse()?))
}

impl UdfRepr {
    fn to_spec(&self, base: &Path) -> Result<UdfSpec> {
        let mut spec = match &self.command {
            None => {
                let mut spec = UdfSpec::builtin(&self.id)?;
                if let Some(c) = &self.column {
                    spec = spec.with_output_name(c);
                }
                if let Some(v) = &self.version {
                    spec.udf_version = v.clone();
                }
                spec
            }
            Some(argv) => {
                let outputs = self
                    .outputs
                    .as_ref()
                    .ok_or_else(|| bad(format!("subprocess UDF {} needs outputs", self.id)))?
                    .iter()
                    .map(|o| parse_output(o))
                    .collect::<Result<Vec<_>>>()?;
                let argv = argv
                    .iter()
                    .enumerate()
                    .map(|(i, a)| {
                        // A relative program path is relative to the file.
                        if i == 0 && a.contains('/') {
                            resolve_path(base, a)
                        } else {
                            a.clone()
                        }
                    })
                    .collect();
                UdfSpec::subprocess(&self.id, self.version.as_deref().unwrap_or("1"), argv, outputs)
            }
        };
        spec.input_columns = self.inputs.clone();
        if let Some(b) = self.needs_sample_bytes {
            spec.needs_sample_bytes = b;
        }
        if let Some(b) = self.batch_size {
            spec.batch_size = b;
        }
        Ok(spec)
    }
}

impl Pipeline {
    pub fn load(path: &Path) -> Result<Pipeline> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Self::parse(&text, &base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Pipeline> {
        let file: FileRepr = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if file.pipeline_version != PIPELINE_VERSION {
            return Err(bad(format!(
                "unsupported pipeline_version {} (expected {PIPELINE_VERSION})",
                file.pipeline_version
            )));
        }
        let mut names = HashSet::new();
        let mut stages = Vec::new();
        for s in file.stages {
            if !is_valid_name(&s.save_as) {
                return Err(Error::BadName(s.save_as));
            }
            if !names.insert(s.save_as.clone()) {
                return Err(bad(format!("duplicate stage {:?}", s.save_as)));
            }
            let params = s
                .params
                .iter()
                .map(|(k, v)| Ok((k.clone(), param_from_json(base_dir, k, v)?)))
                .collect::<Result<Params>>()?;
            let need = |field: &Option<String>, what: &str| {
                field
                    .clone()
                    .ok_or_else(|| bad(format!("stage {:?} ({}) needs {what}", s.save_as, s.op)))
            };
            let stage = match s.op {
                StageKind::Etl => {
                    if s.sources.is_empty() {
                        return Err(bad(format!("stage {:?} has no sources", s.save_as)));
                    }
                    Stage::Etl {
                        sources: Vec::new(),
                        coerce_text: s.coerce_text,
                    }
                }
                StageKind::Filter => Stage::Filter {
                    expr: need(&s.expr, "expr")?,
                    params,
                },
                StageKind::Mutate => Stage::Mutate {
                    column: need(&s.column, "column")?,
                    expr: need(&s.expr, "expr")?,
                    params,
                },
                StageKind::AddSignals => Stage::AddSignals {
                    udf: s
                        .udf
                        .as_ref()
                        .ok_or_else(|| bad(format!("stage {:?} needs udf", s.save_as)))?
                        .to_spec(base_dir)?,
                    params,
                },
                StageKind::OrderLimit => Stage::OrderLimit {
                    key: need(&s.key, "key")?,
                    descending: s.descending,
                    limit: s.limit,
                },
                StageKind::Union => Stage::Union,
            };
            if s.inputs.len() != stage.arity() {
                return Err(bad(format!(
                    "stage {:?} ({}) takes {} input(s), got {}",
                    s.save_as,
                    s.op,
                    stage.arity(),
                    s.inputs.len()
                )));
            }
            for input in &s.inputs {
                if input == &s.save_as {
                    return Err(bad(format!("stage {:?} reads its own output", s.save_as)));
                }
                input.parse::<VersionRef>()?;
            }
            stages.push(PipelineStage {
                save_as: s.save_as,
                inputs: s.inputs,
                stage,
                etl_patterns: s.sources,
            });
        }
        Ok(Pipeline {
            stages,
            base_dir: base_dir.to_path_buf(),
        })
    }

    /// Expands ETL source patterns against the filesystem as it is now.
    fn expand_sources(&self, patterns: &[SourceRepr]) -> Result<Vec<EtlSource>> {
        let mut out = Vec::new();
        for p in patterns {
            let archive = resolve_path(&self.base_dir, &p.archive);
            let archives: Vec<String> = if archive.contains('*') && !archive.contains("://") {
                let mut found: Vec<String> = glob::glob(&archive)
                    .map_err(|e| bad(format!("bad pattern {archive:?}: {e}")))?
                    .filter_map(|r| r.ok())
                    .map(|p| p.to_string_lossy().into_owned())
                    .collect();
                found.sort();
                if found.is_empty() {
                    return Err(Error::NotFound(archive));
                }
                found
            } else {
                vec![archive]
            };
            for a in archives {
                let stem = Path::new(&a)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let sidecar = p
                    .sidecar
                    .as_ref()
                    .map(|s| resolve_path(&self.base_dir, &s.replace("{stem}", &stem)));
                out.push(EtlSource {
                    archive: a,
                    sidecar,
                    format: p.format,
                });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Full,
    Incremental,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageStatus {
    Executed {
        mode: ExecMode,
        version: u32,
        /// False when the result matched an existing version.
        new_version: bool,
    },
    Skipped {
        version: u32,
    },
    Failed {
        error: String,
    },
    Blocked {
        by: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub name: String,
    pub kind: StageKind,
    pub status: StageStatus,
    /// Rows the stage evaluated (the delta when incremental).
    pub rows_processed: u64,
    /// Rows handed to a UDF.
    pub udf_rows: u64,
    pub output_rows: u64,
}

#[derive(Debug)]
pub struct RunReport {
    pub stages: Vec<StageReport>,
    /// Stale datasets the catalog reported before the run.
    pub stale_before: Vec<VersionRef>,
    /// The first failure, if any.
    pub error: Option<Error>,
}

impl RunReport {
    pub fn executed(&self) -> Vec<&str> {
        self.stages
            .iter()
            .filter(|s| matches!(s.status, StageStatus::Executed { .. }))
            .map(|s| s.name.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Recompute every stage from scratch.
    pub force: bool,
}

/// Executes the stages that are missing or out of date.
///
/// A stage is up to date when some version of its output was produced by the
/// same descriptor from the current input versions. Row-local stages with a
/// previous compatible output are applied incrementally.
pub fn run_pipeline(catalog: &Catalog, engine: &Engine, pipeline: &Pipeline, opts: RunOptions) -> RunReport {
    let stale_before = catalog.find_stale(None).unwrap_or_default();
    let mut produced: HashMap<String, DatasetManifest> = HashMap::new();
    let mut failed: HashMap<String, String> = HashMap::new();
    let mut reports = Vec::new();
    let mut first_error = None;

    for ps in &pipeline.stages {
        let blocker = ps
            .inputs
            .iter()
            .find_map(|i| failed.get(i).map(|_| i.clone()));
        if let Some(by) = blocker {
            failed.insert(ps.save_as.clone(), by.clone());
            reports.push(StageReport {
                name: ps.save_as.clone(),
                kind: ps.stage.kind(),
                status: StageStatus::Blocked { by },
                rows_processed: 0,
                udf_rows: 0,
                output_rows: 0,
            });
            continue;
        }
        match run_stage(catalog, engine, pipeline, ps, &produced, opts) {
            Ok((report, manifest)) => {
                produced.insert(ps.save_as.clone(), manifest);
                reports.push(report);
            }
            Err(e) => {
                failed.insert(ps.save_as.clone(), ps.save_as.clone());
                reports.push(StageReport {
                    name: ps.save_as.clone(),
                    kind: ps.stage.kind(),
                    status: StageStatus::Failed { error: e.to_string() },
                    rows_processed: 0,
                    udf_rows: 0,
                    output_rows: 0,
                });
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
    }
    RunReport {
        stages: reports,
        stale_before,
        error: first_error,
    }
}

fn run_stage(
    catalog: &Catalog,
    engine: &Engine,
    pipeline: &Pipeline,
    ps: &PipelineStage,
    produced: &HashMap<String, DatasetManifest>,
    opts: RunOptions,
) -> Result<(StageReport, DatasetManifest)> {
    let stage = match &ps.stage {
        Stage::Etl { coerce_text, .. } => Stage::Etl {
            sources: pipeline.expand_sources(&ps.etl_patterns)?,
            coerce_text: *coerce_text,
        },
        other => other.clone(),
    };
    let inputs: Vec<DatasetManifest> = ps
        .inputs
        .iter()
        .map(|i| match produced.get(i) {
            Some(m) => Ok(m.clone()),
            None => catalog.resolve_str(i),
        })
        .collect::<Result<_>>()?;
    let input_fps: Vec<String> = inputs.iter().map(|m| m.fingerprint.clone()).collect();
    let descriptor = stage.descriptor(engine)?;
    let existing = catalog.versions(&ps.save_as)?;

    let report = |status, rows_processed, udf_rows, output_rows| StageReport {
        name: ps.save_as.clone(),
        kind: stage.kind(),
        status,
        rows_processed,
        udf_rows,
        output_rows,
    };

    if !opts.force {
        if let Some(m) = existing
            .iter()
            .rev()
            .find(|m| m.operation == descriptor && m.parents == input_fps)
        {
            let rows = m.row_count;
            return Ok((report(StageStatus::Skipped { version: m.version }, 0, 0, rows), m.clone()));
        }
    }

    let loaded = inputs
        .iter()
        .map(|m| catalog.load_manifest(m))
        .collect::<Result<Vec<_>>>()?;
    let input_refs: Vec<&_> = loaded.iter().collect();
    let udf_before = engine.udf_rows_processed();

    let mut mode = ExecMode::Full;
    let mut result = None;
    if !opts.force && stage.kind().is_row_local() {
        // Newest previous output made by this exact stage definition.
        let prior = existing
            .iter()
            .rev()
            .find(|m| m.operation == descriptor && m.parents.len() == 1);
        if let Some(prior) = prior {
            if let Some(old_parent) = catalog.find_by_fingerprint(&prior.parents[0])? {
                if old_parent.schema == loaded[0].schema().clone() {
                    let old_parent = catalog.load_manifest(&old_parent)?;
                    let old_output = catalog.load_manifest(prior)?;
                    let out = engine.incremental_apply(&stage, &old_parent, &loaded[0], &old_output)?;
                    mode = ExecMode::Incremental;
                    result = Some((out.dataset, out.delta_rows as u64));
                }
            }
        }
    }
    let (dataset, rows_processed) = match result {
        Some(r) => r,
        None => {
            let ds = stage.run(engine, &input_refs)?;
            let rows = match stage.kind() {
                StageKind::Etl => ds.row_count() as u64,
                _ => loaded.iter().map(|d| d.row_count() as u64).sum(),
            };
            (ds, rows)
        }
    };
    let udf_rows = engine.udf_rows_processed() - udf_before;
    let known: HashSet<u32> = existing.iter().map(|m| m.version).collect();
    let manifest = catalog.save(&dataset, &ps.save_as)?;
    let status = StageStatus::Executed {
        mode,
        version: manifest.version,
        new_version: !known.contains(&manifest.version),
    };
    let output_rows = manifest.row_count;
    Ok((report(status, rows_processed, udf_rows, output_rows), manifest))
}
