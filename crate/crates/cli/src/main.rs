//! `df`: build, query, version and export archive-backed sample datasets.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value as Json};

use dfkit_core::cache::{Cache, CacheConfig, SampleSource};
use dfkit_core::canonical::canonical_value;
use dfkit_core::catalog::{Catalog, VersionRef};
use dfkit_core::engine::{run_builtin, Engine, EngineConfig, EtlSource, SidecarFormat, Stage, UdfSpec};
use dfkit_core::export::{self, ExportManifest};
use dfkit_core::expr::Params;
use dfkit_core::fixture::DatasetFixture;
use dfkit_core::pipeline::{self, ExecMode, Pipeline, RunOptions, StageStatus};
use dfkit_core::storage::{Storage, StorageConfig};
use dfkit_core::table::{Dataset, DatasetManifest, Value, REF_LENGTH, REF_MEMBER_PATH, REF_OFFSET, REF_SOURCE_URI, UID};
use dfkit_core::{Error, Result};

#[derive(Parser)]
#[command(name = "df", version, about = "Versioned metadata tables over archive-resident samples")]
struct Cli {
    /// Catalog root.
    #[arg(long, env = "DF_ROOT", default_value = ".", global = true)]
    root: PathBuf,
    /// Print one canonical JSON document instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Read samples straight from storage, bypassing the cache.
    #[arg(long, global = true)]
    no_cache: bool,
    /// Disable range coalescing (one GET per sample).
    #[arg(long, global = true)]
    no_coalesce: bool,
    /// Concurrent UDF workers.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Per-batch UDF deadline in seconds.
    #[arg(long, global = true)]
    udf_timeout: Option<f64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create an empty catalog.
    Init { root: Option<PathBuf> },
    /// Index archives, join their sidecars and save the base table.
    Etl {
        #[arg(long, required = true, num_args = 1..)]
        archive: Vec<String>,
        /// One sidecar per archive, or a single one containing `{stem}`.
        #[arg(long, num_args = 1..)]
        sidecar: Vec<String>,
        #[arg(long)]
        format: Option<SidecarFormat>,
        /// Store mixed-type metadata fields as text instead of failing.
        #[arg(long)]
        coerce_text: bool,
        #[arg(long)]
        save: String,
    },
    /// Keep the rows matching a predicate.
    Query {
        reference: String,
        #[arg(long)]
        filter: String,
        #[command(flatten)]
        params: ParamArgs,
        #[command(flatten)]
        out: SaveOrShow,
    },
    /// Add signal columns computed by a UDF.
    Enrich {
        reference: String,
        #[command(flatten)]
        udf: UdfArgs,
        /// Subprocess output columns as `name:type`.
        #[arg(long = "out")]
        outputs: Vec<String>,
        #[arg(long)]
        batch_size: Option<u32>,
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long)]
        save: String,
    },
    /// Add or replace a column computed by an expression.
    Mutate {
        reference: String,
        /// `name = expression`
        #[arg(long)]
        set: String,
        #[command(flatten)]
        params: ParamArgs,
        #[command(flatten)]
        out: SaveOrShow,
    },
    /// Order by a column, optionally keeping the first rows.
    Sort {
        reference: String,
        #[arg(long)]
        by: String,
        #[arg(long)]
        desc: bool,
        #[arg(long)]
        limit: Option<u64>,
        #[command(flatten)]
        out: SaveOrShow,
    },
    /// Concatenate two datasets with identical schemas.
    Union {
        a: String,
        b: String,
        #[arg(long)]
        save: String,
    },
    /// List datasets and their versions.
    Ls,
    /// Show the versions of a dataset and their parents.
    Log { name: String },
    /// Print a version's schema and first rows.
    Show {
        reference: String,
        #[arg(long, default_value_t = 10)]
        head: usize,
    },
    /// Execute the out-of-date stages of a pipeline file.
    Run {
        file: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Write a shard of a deterministic, shuffled export manifest.
    Export {
        reference: String,
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        rank: u32,
        #[arg(long, default_value_t = 1)]
        world: u32,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Download the samples of a dataset or export manifest into a directory.
    Fetch {
        /// A dataset reference or an export manifest (`.jsonl`).
        source: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a UDF on one standalone file and write the result as a JSON parameter.
    EmbedFile {
        path: PathBuf,
        #[command(flatten)]
        udf: UdfArgs,
        /// Subprocess output column as `name:type`.
        #[arg(long = "col")]
        outputs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// List named datasets whose parents have moved on.
    Stale { name: Option<String> },
    /// Delete versions unreachable from the kept ones.
    Gc {
        #[arg(long, required = true, num_args = 1..)]
        keep: Vec<String>,
    },
    /// Generate the synthetic tar + JSONL fixture.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        shards: usize,
        #[arg(long, default_value_t = 1000)]
        members: usize,
        /// Generate only this shard.
        #[arg(long)]
        shard: Option<usize>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Reference subprocess UDF speaking the plugin protocol on stdin/stdout.
    #[command(hide = true, disable_help_flag = true)]
    EchoUdf {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

#[derive(Args)]
struct ParamArgs {
    /// `name=value`, or `name=@file.json` to read a JSON value.
    #[arg(long = "param")]
    param: Vec<String>,
}

impl ParamArgs {
    fn parse(&self) -> Result<Params> {
        self.param
            .iter()
            .map(|p| {
                let (k, v) = p
                    .split_once('=')
                    .ok_or_else(|| Error::BadArgument(format!("expected name=value, got {p:?}")))?;
                let k = k.trim().trim_start_matches('@').to_string();
                let value = match v.strip_prefix('@') {
                    Some(path) => pipeline::load_param_file(Path::new(path), &k)?,
                    None => Value::parse_param(v),
                };
                Ok((k, value))
            })
            .collect()
    }
}

#[derive(Args)]
struct SaveOrShow {
    /// Save the result under this name; without it the first rows are printed.
    #[arg(long)]
    save: Option<String>,
    #[arg(long, default_value_t = 10)]
    head: usize,
}

#[derive(Args)]
struct UdfArgs {
    #[arg(long)]
    udf: String,
    /// Subprocess command line (shell-quoted); omit for a builtin.
    #[arg(long = "cmd")]
    command: Option<String>,
    #[arg(long)]
    version: Option<String>,
    /// Output column name for a builtin.
    #[arg(long)]
    column: Option<String>,
    /// Attribute columns passed to the UDF.
    #[arg(long = "input-col")]
    inputs: Vec<String>,
    /// Do not send sample bytes.
    #[arg(long)]
    no_sample_bytes: bool,
}

impl UdfArgs {
    /// `outputs` are `name:type` entries, e.g. `embed:fvec:64`; required
    /// for a subprocess UDF.
    fn spec(&self, outputs: &[String]) -> Result<UdfSpec> {
        let mut spec = match &self.command {
            None => {
                let mut spec = UdfSpec::builtin(&self.udf)?;
                if let Some(c) = &self.column {
                    spec = spec.with_output_name(c);
                }
                if let Some(v) = &self.version {
                    spec.udf_version = v.clone();
                }
                spec
            }
            Some(cmd) => {
                let argv = shlex::split(cmd)
                    .filter(|a| !a.is_empty())
                    .ok_or_else(|| Error::BadArgument(format!("cannot parse command {cmd:?}")))?;
                if outputs.is_empty() {
                    return Err(Error::BadArgument("a subprocess UDF needs its outputs as name:type".into()));
                }
                let outputs = outputs
                    .iter()
                    .map(|o| pipeline::parse_output(o))
                    .collect::<Result<Vec<_>>>()?;
                UdfSpec::subprocess(&self.udf, self.version.as_deref().unwrap_or("1"), argv, outputs)
            }
        };
        spec.input_columns = self.inputs.clone();
        spec.needs_sample_bytes = !self.no_sample_bytes;
        Ok(spec)
    }
}

struct Ctx {
    root: PathBuf,
    json: bool,
    no_cache: bool,
    no_coalesce: bool,
    workers: Option<usize>,
    udf_timeout: Option<f64>,
}

impl Ctx {
    fn catalog(&self) -> Result<Catalog> {
        Catalog::open(&self.root)
    }

    fn storage(&self) -> Storage {
        let mut cfg = StorageConfig::default();
        if self.no_coalesce {
            cfg.coalesce_gap = None;
        }
        Storage::new(cfg)
    }

    fn samples(&self) -> Result<SampleSource> {
        let storage = self.storage();
        if self.no_cache {
            return Ok(SampleSource::Direct(storage));
        }
        let cfg = CacheConfig::from_env(self.root.join("cache"))?;
        Ok(SampleSource::Cached(Arc::new(Cache::new(cfg, storage)?)))
    }

    fn engine(&self) -> Result<Engine> {
        let mut cfg = EngineConfig::default();
        if let Some(w) = self.workers {
            cfg.workers = w.max(1);
        }
        if let Some(t) = self.udf_timeout {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::BadArgument(format!("--udf-timeout must be positive, got {t}")));
            }
            cfg.udf_timeout = Duration::from_secs_f64(t);
        }
        Ok(Engine::new(self.samples()?, cfg))
    }

    fn emit(&self, doc: Json, text: impl FnOnce() -> String) {
        let mut out = std::io::stdout().lock();
        let s = if self.json { canonical_value(&doc) } else { text() };
        if !s.is_empty() {
            let _ = writeln!(out, "{s}");
        }
    }
}

fn load(catalog: &Catalog, reference: &str) -> Result<Dataset> {
    catalog.load(&reference.parse::<VersionRef>()?)
}

/// Saves and reports whether a new version was written.
fn save(catalog: &Catalog, ds: &Dataset, name: &str) -> Result<(DatasetManifest, bool)> {
    let before = catalog.versions(name).map(|v| v.len()).unwrap_or(0);
    let m = catalog.save(ds, name)?;
    let after = catalog.versions(name)?.len();
    Ok((m, after > before))
}

fn saved_doc(m: &DatasetManifest, created: bool) -> Json {
    json!({
        "name": m.name,
        "version": m.version,
        "fingerprint": m.fingerprint,
        "row_count": m.row_count,
        "created": created,
    })
}

fn saved_text(m: &DatasetManifest, created: bool) -> String {
    format!(
        "{} {}.v{} ({} rows, {})",
        if created { "saved" } else { "unchanged" },
        m.name,
        m.version,
        m.row_count,
        &m.fingerprint[..12]
    )
}

fn finish(ctx: &Ctx, catalog: &Catalog, ds: Dataset, out: &SaveOrShow) -> Result<()> {
    match &out.save {
        Some(name) => {
            let (m, created) = save(catalog, &ds, name)?;
            ctx.emit(saved_doc(&m, created), || saved_text(&m, created));
        }
        None => {
            let label = ds.provenance().fingerprint;
            print_table(ctx, &ds, &label, out.head);
        }
    }
    Ok(())
}

fn is_ref_column(name: &str) -> bool {
    [REF_SOURCE_URI, REF_MEMBER_PATH, REF_OFFSET, REF_LENGTH].contains(&name)
}

fn print_table(ctx: &Ctx, ds: &Dataset, label: &str, head: usize) {
    let fields = ds.schema().fields();
    let shown: Vec<usize> = (0..fields.len())
        .filter(|&i| !is_ref_column(&fields[i].name))
        .collect();
    let n = head.min(ds.row_count());
    let doc = json!({
        "dataset": label,
        "row_count": ds.row_count(),
        "schema": fields.iter().map(|f| json!({"name": f.name, "type": f.ty.to_string(), "nullable": f.nullable})).collect::<Vec<_>>(),
        "rows": (0..n).map(|r| {
            let values = ds.row_values(r);
            let mut row: BTreeMap<String, Json> = fields.iter().zip(&values).map(|(f, v)| (f.name.clone(), v.to_json())).collect();
            let s = ds.sample_ref(r);
            row.insert("_ref".into(), json!(format!("{}@{}+{}", s.member_path, s.offset, s.length)));
            row.retain(|k, _| !is_ref_column(k));
            row
        }).collect::<Vec<_>>(),
    });
    ctx.emit(doc, || {
        let mut s = format!("{label}: {} rows\n", ds.row_count());
        for f in fields {
            s.push_str(&format!("  {:<20} {}{}\n", f.name, f.ty, if f.nullable { "?" } else { "" }));
        }
        let mut header: Vec<String> = shown.iter().map(|&i| fields[i].name.clone()).collect();
        header.push("_ref".into());
        let mut rows: Vec<Vec<String>> = vec![header];
        for r in 0..n {
            let values = ds.row_values(r);
            let mut cells: Vec<String> = shown
                .iter()
                .map(|&i| match &values[i] {
                    Value::Text(uid) if fields[i].name == UID => uid[..12.min(uid.len())].to_string(),
                    v => v.to_string(),
                })
                .collect();
            let sr = ds.sample_ref(r);
            cells.push(format!("{}@{}+{}", sr.member_path, sr.offset, sr.length));
            rows.push(cells);
        }
        s.push_str(&render(&rows));
        s
    });
}

fn render(rows: &[Vec<String>]) -> String {
    let cols = rows.first().map_or(0, Vec::len);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        s.push_str(line.join("  ").trim_end());
        s.push('\n');
    }
    s.pop();
    s
}

fn etl_sources(archives: &[String], sidecars: &[String], format: Option<SidecarFormat>) -> Result<Vec<EtlSource>> {
    let sidecar_for = |i: usize, archive: &str| -> Result<Option<String>> {
        Ok(match sidecars {
            [] => None,
            [one] if one.contains("{stem}") => {
                let stem = Path::new(archive)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Some(one.replace("{stem}", &stem))
            }
            [one] if archives.len() == 1 => Some(one.clone()),
            many if many.len() == archives.len() => Some(many[i].clone()),
            _ => {
                return Err(Error::BadArgument(format!(
                    "{} sidecars for {} archives (give one per archive or one containing {{stem}})",
                    sidecars.len(),
                    archives.len()
                )))
            }
        })
    };
    archives
        .iter()
        .enumerate()
        .map(|(i, a)| {
            Ok(EtlSource {
                archive: a.clone(),
                sidecar: sidecar_for(i, a)?,
                format,
            })
        })
        .collect()
}

/// Depth-first ancestry of a version: `(depth, label, kind, fingerprint)`.
fn lineage(catalog: &Catalog, fp: &str) -> Result<Vec<(usize, String, String, String)>> {
    let mut out = Vec::new();
    let mut stack = vec![(0usize, fp.to_string())];
    while let Some((depth, fp)) = stack.pop() {
        let node = catalog.node(&fp)?;
        let label = match (&node.name, node.version) {
            (Some(n), Some(v)) => format!("{n}.v{v}"),
            _ => String::from("(unnamed)"),
        };
        out.push((depth, label, node.descriptor.kind.as_str().to_string(), fp));
        stack.extend(node.parents.iter().rev().map(|p| (depth + 1, p.clone())));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        root: cli.root,
        json: cli.json,
        no_cache: cli.no_cache,
        no_coalesce: cli.no_coalesce,
        workers: cli.workers,
        udf_timeout: cli.udf_timeout,
    };
    match cli.cmd {
        Cmd::EchoUdf { .. } => unreachable!("handled in main"),
        Cmd::Init { root } => {
            let root = root.unwrap_or_else(|| ctx.root.clone());
            Catalog::init(&root)?;
            ctx.emit(json!({"root": root.display().to_string()}), || {
                format!("initialized catalog at {}", root.display())
            });
        }
        Cmd::Etl {
            archive,
            sidecar,
            format,
            coerce_text,
            save: name,
        } => {
            let catalog = ctx.catalog()?;
            let stage = Stage::Etl {
                sources: etl_sources(&archive, &sidecar, format)?,
                coerce_text,
            };
            let ds = stage.run(&ctx.engine()?, &[])?;
            let (m, created) = save(&catalog, &ds, &name)?;
            ctx.emit(saved_doc(&m, created), || saved_text(&m, created));
        }
        Cmd::Query {
            reference,
            filter,
            params,
            out,
        } => {
            let catalog = ctx.catalog()?;
            let parent = load(&catalog, &reference)?;
            let ds = Stage::Filter {
                expr: filter,
                params: params.parse()?,
            }
            .run(&ctx.engine()?, &[&parent])?;
            finish(&ctx, &catalog, ds, &out)?;
        }
        Cmd::Enrich {
            reference,
            udf,
            outputs,
            batch_size,
            params,
            save: name,
        } => {
            let catalog = ctx.catalog()?;
            let parent = load(&catalog, &reference)?;
            let mut spec = udf.spec(&outputs)?;
            if let Some(b) = batch_size {
                spec.batch_size = b.max(1);
            }
            let engine = ctx.engine()?;
            let ds = Stage::AddSignals {
                udf: spec,
                params: params.parse()?,
            }
            .run(&engine, &[&parent])?;
            let (m, created) = save(&catalog, &ds, &name)?;
            let rows = engine.udf_rows_processed();
            let mut doc = saved_doc(&m, created);
            doc["udf_rows"] = json!(rows);
            ctx.emit(doc, || format!("{} [udf rows: {rows}]", saved_text(&m, created)));
        }
        Cmd::Mutate {
            reference,
            set,
            params,
            out,
        } => {
            let (column, expr) = set
                .split_once('=')
                .filter(|(c, e)| !c.trim().is_empty() && !e.trim().is_empty() && !e.starts_with('='))
                .ok_or_else(|| Error::BadArgument(format!("expected \"name = expression\", got {set:?}")))?;
            let catalog = ctx.catalog()?;
            let parent = load(&catalog, &reference)?;
            let ds = Stage::Mutate {
                column: column.trim().to_string(),
                expr: expr.trim().to_string(),
                params: params.parse()?,
            }
            .run(&ctx.engine()?, &[&parent])?;
            finish(&ctx, &catalog, ds, &out)?;
        }
        Cmd::Sort {
            reference,
            by,
            desc,
            limit,
            out,
        } => {
            let catalog = ctx.catalog()?;
            let parent = load(&catalog, &reference)?;
            let ds = Stage::OrderLimit {
                key: by,
                descending: desc,
                limit,
            }
            .run(&ctx.engine()?, &[&parent])?;
            finish(&ctx, &catalog, ds, &out)?;
        }
        Cmd::Union { a, b, save: name } => {
            let catalog = ctx.catalog()?;
            let (a, b) = (load(&catalog, &a)?, load(&catalog, &b)?);
            let ds = Stage::Union.run(&ctx.engine()?, &[&a, &b])?;
            let (m, created) = save(&catalog, &ds, &name)?;
            ctx.emit(saved_doc(&m, created), || saved_text(&m, created));
        }
        Cmd::Ls => {
            let catalog = ctx.catalog()?;
            let mut entries = Vec::new();
            for (name, versions) in catalog.list()? {
                let latest = catalog.resolve(&VersionRef::latest(&name))?;
                entries.push((name, versions, latest));
            }
            let doc = json!(entries
                .iter()
                .map(|(n, v, m)| json!({"name": n, "versions": v, "latest_rows": m.row_count, "latest_fingerprint": m.fingerprint}))
                .collect::<Vec<_>>());
            ctx.emit(doc, || {
                let mut rows = vec![vec!["NAME".to_string(), "VERSIONS".into(), "ROWS".into(), "FINGERPRINT".into()]];
                for (n, v, m) in &entries {
                    rows.push(vec![
                        n.clone(),
                        v.len().to_string(),
                        m.row_count.to_string(),
                        m.fingerprint[..12].to_string(),
                    ]);
                }
                render(&rows)
            });
        }
        Cmd::Log { name } => {
            let catalog = ctx.catalog()?;
            let entries = catalog.log(&name)?;
            let lineage = lineage(&catalog, &entries[0].fingerprint)?;
            let parent_label = |p: &dfkit_core::catalog::ParentInfo| match &p.named {
                Some((n, v)) => format!("{n}.v{v}"),
                None => p.fingerprint[..12].to_string(),
            };
            let doc = json!({
                "versions": entries
                    .iter()
                    .map(|e| json!({
                        "name": e.name,
                        "version": e.version,
                        "fingerprint": e.fingerprint,
                        "kind": e.kind.as_str(),
                        "row_count": e.row_count,
                        "created_at": e.created_at,
                        "parents": e.parents.iter().map(|p| p.fingerprint.clone()).collect::<Vec<_>>(),
                    }))
                    .collect::<Vec<_>>(),
                "lineage": lineage
                    .iter()
                    .map(|(depth, label, kind, fp)| json!({"depth": depth, "ref": label, "kind": kind, "fingerprint": fp}))
                    .collect::<Vec<_>>(),
            });
            ctx.emit(doc, || {
                let mut lines: Vec<String> = entries
                    .iter()
                    .map(|e| {
                        let parents: Vec<String> = e.parents.iter().map(parent_label).collect();
                        format!(
                            "{}.v{}  {}  {:<11}  {:>8} rows  {}  <- [{}]",
                            e.name,
                            e.version,
                            &e.fingerprint[..12],
                            e.kind.as_str(),
                            e.row_count,
                            e.created_at,
                            parents.join(", ")
                        )
                    })
                    .collect();
                lines.push(String::from("lineage:"));
                for (depth, label, kind, fp) in &lineage {
                    lines.push(format!("{}{label}  {kind}  {}", "  ".repeat(depth + 1), &fp[..12]));
                }
                lines.join("\n")
            });
        }
        Cmd::Show { reference, head } => {
            let catalog = ctx.catalog()?;
            let m = catalog.resolve_str(&reference)?;
            let ds = catalog.load_manifest(&m)?;
            print_table(&ctx, &ds, &format!("{}.v{} ({})", m.name, m.version, &m.fingerprint[..12]), head);
        }
        Cmd::Run { file, force } => {
            let catalog = ctx.catalog()?;
            let engine = ctx.engine()?;
            let p = Pipeline::load(&file)?;
            let report = pipeline::run_pipeline(&catalog, &engine, &p, RunOptions { force });
            let stages: Vec<Json> = report
                .stages
                .iter()
                .map(|s| {
                    let mut d = json!({
                        "name": s.name,
                        "kind": s.kind.as_str(),
                        "rows_processed": s.rows_processed,
                        "udf_rows": s.udf_rows,
                        "output_rows": s.output_rows,
                    });
                    match &s.status {
                        StageStatus::Executed { mode, version, new_version } => {
                            d["status"] = json!("executed");
                            d["mode"] = json!(if *mode == ExecMode::Incremental { "incremental" } else { "full" });
                            d["version"] = json!(version);
                            d["new_version"] = json!(new_version);
                        }
                        StageStatus::Skipped { version } => {
                            d["status"] = json!("skipped");
                            d["version"] = json!(version);
                        }
                        StageStatus::Failed { error } => {
                            d["status"] = json!("failed");
                            d["error"] = json!(error);
                        }
                        StageStatus::Blocked { by } => {
                            d["status"] = json!("blocked");
                            d["blocked_by"] = json!(by);
                        }
                    }
                    d
                })
                .collect();
            let stale: Vec<String> = report.stale_before.iter().map(|r| r.to_string()).collect();
            let doc = json!({"stages": stages, "stale_before": stale, "ok": report.error.is_none()});
            ctx.emit(doc, || {
                report
                    .stages
                    .iter()
                    .map(|s| {
                        let status = match &s.status {
                            StageStatus::Executed { mode, version, .. } => format!(
                                "executed ({}) v{version}",
                                if *mode == ExecMode::Incremental { "incremental" } else { "full" }
                            ),
                            StageStatus::Skipped { version } => format!("skipped v{version}"),
                            StageStatus::Failed { error } => format!("FAILED: {error}"),
                            StageStatus::Blocked { by } => format!("blocked by {by}"),
                        };
                        format!(
                            "{:<16} {:<12} {status}  rows={} udf_rows={} out={}",
                            s.name,
                            s.kind.as_str(),
                            s.rows_processed,
                            s.udf_rows,
                            s.output_rows
                        )
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            });
            if let Some(e) = report.error {
                return Err(e);
            }
        }
        Cmd::Export {
            reference,
            columns,
            seed,
            rank,
            world,
            out,
        } => {
            let catalog = ctx.catalog()?;
            let m = catalog.resolve_str(&reference)?;
            let ds = catalog.load_manifest(&m)?;
            let label = format!("{}.v{}", m.name, m.version);
            let manifest = export::export(&ds, &label, &columns, seed, rank, world)?;
            let text = manifest.to_jsonl();
            match &out {
                Some(path) => {
                    std::fs::write(path, &text).map_err(|e| Error::io(path.display().to_string(), e))?;
                    let doc = json!({"dataset": label, "rows": manifest.rows.len(), "rank": rank, "world": world, "out": path.display().to_string()});
                    ctx.emit(doc, || format!("wrote {} rows of {label} (shard {rank}/{world}) to {}", manifest.rows.len(), path.display()));
                }
                None => {
                    std::io::stdout()
                        .write_all(text.as_bytes())
                        .map_err(|e| Error::io("stdout", e))?;
                }
            }
        }
        Cmd::Fetch { source, out } => {
            let refs = if source.ends_with(".jsonl") && Path::new(&source).is_file() {
                let text = std::fs::read_to_string(&source).map_err(|e| Error::io(source.clone(), e))?;
                ExportManifest::refs_from_jsonl(&text)?
            } else {
                export::dataset_refs(&load(&ctx.catalog()?, &source)?)
            };
            let samples = ctx.samples()?;
            let report = export::fetch_to_dir(&samples, &refs, &out)?;
            let mut doc = json!({
                "rows": report.rows,
                "bytes": report.bytes,
                "get_count": report.requests.get_count,
                "bytes_fetched": report.requests.bytes_fetched,
            });
            if let SampleSource::Cached(cache) = &samples {
                let s = cache.stats();
                doc["cache"] = json!({
                    "local_hits": s.local_hits,
                    "local_misses": s.local_misses,
                    "shared_hits": s.shared_hits,
                    "shared_misses": s.shared_misses,
                    "corrupt_entries": s.corrupt_entries,
                    "evicted_bytes": s.evicted_bytes,
                    "local_bytes": cache.local_size(),
                });
            }
            ctx.emit(doc, || {
                format!(
                    "fetched {} samples ({} bytes) into {}: {} GETs, {} bytes from storage",
                    report.rows,
                    report.bytes,
                    out.display(),
                    report.requests.get_count,
                    report.requests.bytes_fetched
                )
            });
        }
        Cmd::EmbedFile { path, udf, outputs, out } => {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
            let spec = udf.spec(&outputs)?;
            let value = match spec.command() {
                None => run_builtin(&spec.udf_id, &bytes)?,
                Some(_) => {
                    let row = dfkit_core::engine::BatchRow {
                        uid: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                        sample: spec.needs_sample_bytes.then_some(bytes),
                        attrs: BTreeMap::new(),
                    };
                    let timeout = Duration::from_secs_f64(ctx.udf_timeout.unwrap_or(300.0));
                    let cols = dfkit_core::engine::protocol::run_udf_subprocess(&spec, &Params::new(), &[vec![row]], timeout)?;
                    cols.into_iter().next().and_then(|c| c.into_iter().next()).unwrap_or(Value::Null)
                }
            };
            let text = canonical_value(&value.to_json());
            std::fs::write(&out, &text).map_err(|e| Error::io(out.display().to_string(), e))?;
            let ty = value.column_type().map(|t| t.to_string()).unwrap_or_else(|| "null".into());
            ctx.emit(json!({"out": out.display().to_string(), "type": ty}), || {
                format!("wrote {ty} value to {}", out.display())
            });
        }
        Cmd::Stale { name } => {
            let stale = ctx.catalog()?.find_stale(name.as_deref())?;
            let names: Vec<String> = stale.iter().map(|r| r.name.clone()).collect();
            ctx.emit(json!(names), || names.join("\n"));
        }
        Cmd::Gc { keep } => {
            let keep = keep
                .iter()
                .map(|k| k.parse::<VersionRef>())
                .collect::<Result<Vec<_>>>()?;
            let freed = ctx.catalog()?.gc(&keep)?;
            ctx.emit(json!({"bytes_freed": freed}), || format!("freed {freed} bytes"));
        }
        Cmd::Fixture {
            out,
            shards,
            members,
            shard,
            seed,
        } => {
            let fx = DatasetFixture {
                shards,
                members_per_shard: members,
                seed,
                ..Default::default()
            };
            let files = match shard {
                Some(s) => vec![fx.generate_shard(&out, s)?],
                None => fx.generate(&out)?,
            };
            let doc = json!(files
                .iter()
                .map(|f| json!({"archive": f.archive.display().to_string(), "sidecar": f.sidecar.display().to_string(), "members": f.members}))
                .collect::<Vec<_>>());
            ctx.emit(doc, || format!("wrote {} shard(s) to {}", files.len(), out.display()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Cmd::EchoUdf { args } = cli.cmd {
        return ExitCode::from(dfkit_core::engine::echo::main(args));
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("df: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
