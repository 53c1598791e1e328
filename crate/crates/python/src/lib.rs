//! Python bindings: catalogs, datasets, the operation engine, pipelines and
//! exports.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};
use pyo3::IntoPyObjectExt;

use dfkit_core::cache::{Cache, CacheConfig, SampleSource};
use dfkit_core::catalog::{self, VersionRef};
use dfkit_core::engine::{self, EngineConfig, EtlSource, UdfSpec};
use dfkit_core::expr::Params;
use dfkit_core::pipeline::{self, ExecMode, Pipeline, RunOptions, StageStatus};
use dfkit_core::storage::Storage;
use dfkit_core::table::{DatasetManifest, Value};
use dfkit_core::{ErrorClass, Result as CoreResult};

create_exception!(dfkit, DfError, PyException, "Base class of dfkit errors.");
create_exception!(dfkit, UserError, DfError, "Bad input: parse, type or reference errors.");
create_exception!(dfkit, DataError, DfError, "Join, schema or UDF failures.");
create_exception!(dfkit, StorageError, DfError, "I/O, network and locking failures.");

fn to_py(e: dfkit_core::Error) -> PyErr {
    let msg = e.to_string();
    match e.class() {
        ErrorClass::User => UserError::new_err(msg),
        ErrorClass::Data => DataError::new_err(msg),
        ErrorClass::Io => StorageError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for CoreResult<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn value_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    match v {
        Value::Null => Ok(py.None().into_bound(py)),
        Value::Int(i) => i.into_bound_py_any(py),
        Value::Float(x) => x.into_bound_py_any(py),
        Value::Bool(b) => b.into_bound_py_any(py),
        Value::Text(s) => s.into_bound_py_any(py),
        Value::Bytes(b) => Ok(PyBytes::new(py, b).into_any()),
        Value::FVec(xs) => xs.clone().into_bound_py_any(py),
    }
}

fn value_from_py(name: &str, obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    // bool before int: Python bools are ints.
    if let Ok(b) = obj.extract::<bool>() {
        return Ok(Value::Bool(b));
    }
    if let Ok(i) = obj.extract::<i64>() {
        return Ok(Value::Int(i));
    }
    if let Ok(x) = obj.extract::<f64>() {
        return Ok(Value::Float(x));
    }
    if let Ok(s) = obj.extract::<String>() {
        return Ok(Value::Text(s));
    }
    if let Ok(v) = obj.extract::<Vec<f32>>() {
        return Ok(Value::FVec(v));
    }
    Err(UserError::new_err(format!(
        "parameter {name}: unsupported value {}",
        obj.repr()?
    )))
}

fn params_from_py(params: Option<&Bound<'_, PyDict>>) -> PyResult<Params> {
    let mut out = Params::new();
    if let Some(d) = params {
        for (k, v) in d.iter() {
            let k: String = k.extract()?;
            let v = value_from_py(&k, &v)?;
            out.insert(k, v);
        }
    }
    Ok(out)
}

fn manifest_dict<'py>(py: Python<'py>, m: &DatasetManifest) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("name", &m.name)?;
    d.set_item("version", m.version)?;
    d.set_item("fingerprint", &m.fingerprint)?;
    d.set_item("row_count", m.row_count)?;
    d.set_item("parents", m.parents.clone())?;
    d.set_item("kind", m.operation.kind.as_str())?;
    d.set_item("created_at", &m.created_at)?;
    Ok(d)
}

/// An immutable table of sample pointers and attributes.
#[pyclass(frozen, module = "dfkit")]
struct Dataset {
    inner: dfkit_core::table::Dataset,
}

#[pymethods]
impl Dataset {
    #[getter]
    fn row_count(&self) -> usize {
        self.inner.row_count()
    }

    fn __len__(&self) -> usize {
        self.inner.row_count()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.provenance().fingerprint
    }

    /// `[(name, type, nullable), ...]`
    #[getter]
    fn schema(&self) -> Vec<(String, String, bool)> {
        self.inner
            .schema()
            .fields()
            .iter()
            .map(|f| (f.name.clone(), f.ty.to_string(), f.nullable))
            .collect()
    }

    fn uids(&self) -> Vec<String> {
        self.inner.uids().into_iter().map(str::to_string).collect()
    }

    fn column<'py>(&self, py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyList>> {
        let col = self
            .inner
            .column(name)
            .ok_or_else(|| to_py(dfkit_core::Error::UnknownColumn(name.to_string())))?;
        let items = col
            .values()
            .iter()
            .map(|v| value_to_py(py, v))
            .collect::<PyResult<Vec<_>>>()?;
        PyList::new(py, items)
    }

    /// The first `n` rows as dicts.
    #[pyo3(signature = (n = 10))]
    fn head<'py>(&self, py: Python<'py>, n: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let fields = self.inner.schema().fields();
        (0..n.min(self.inner.row_count()))
            .map(|r| {
                let d = PyDict::new(py);
                for (f, v) in fields.iter().zip(self.inner.row_values(r)) {
                    d.set_item(&f.name, value_to_py(py, &v)?)?;
                }
                Ok(d)
            })
            .collect()
    }

    /// Reads one row's sample bytes straight from storage.
    fn sample<'py>(&self, py: Python<'py>, row: usize) -> PyResult<Bound<'py, PyBytes>> {
        if row >= self.inner.row_count() {
            return Err(pyo3::exceptions::PyIndexError::new_err(row));
        }
        let r = self.inner.sample_ref(row);
        let data = dfkit_core::cache::fetch_direct(&Storage::default(), std::slice::from_ref(&r))
            .py()?
            .remove(0);
        Ok(PyBytes::new(py, &data))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(rows={}, columns={}, fingerprint={})",
            self.inner.row_count(),
            self.inner.schema().fields().len(),
            &self.fingerprint()[..12]
        )
    }
}

/// A directory of named, immutable dataset versions.
#[pyclass(frozen, module = "dfkit")]
struct Catalog {
    inner: catalog::Catalog,
}

fn parse_ref(r: &str) -> PyResult<VersionRef> {
    r.parse::<VersionRef>().py()
}

#[pymethods]
impl Catalog {
    #[new]
    fn open(root: PathBuf) -> PyResult<Self> {
        Ok(Catalog {
            inner: catalog::Catalog::open(root).py()?,
        })
    }

    #[staticmethod]
    fn init(root: PathBuf) -> PyResult<Self> {
        Ok(Catalog {
            inner: catalog::Catalog::init(root).py()?,
        })
    }

    #[getter]
    fn root(&self) -> PathBuf {
        self.inner.root().to_path_buf()
    }

    /// `[(name, [versions])]`
    fn list(&self) -> PyResult<Vec<(String, Vec<u32>)>> {
        self.inner.list().py()
    }

    fn load(&self, reference: &str) -> PyResult<Dataset> {
        Ok(Dataset {
            inner: self.inner.load(&parse_ref(reference)?).py()?,
        })
    }

    fn manifest<'py>(&self, py: Python<'py>, reference: &str) -> PyResult<Bound<'py, PyDict>> {
        manifest_dict(py, &self.inner.resolve_str(reference).py()?)
    }

    /// Saves `ds` under `name`; an identical existing version is returned.
    fn save<'py>(&self, py: Python<'py>, ds: &Dataset, name: &str) -> PyResult<Bound<'py, PyDict>> {
        let m = py.allow_threads(|| self.inner.save(&ds.inner, name)).py()?;
        manifest_dict(py, &m)
    }

    fn log<'py>(&self, py: Python<'py>, name: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .log(name)
            .py()?
            .into_iter()
            .map(|e| {
                let d = PyDict::new(py);
                d.set_item("name", e.name)?;
                d.set_item("version", e.version)?;
                d.set_item("fingerprint", e.fingerprint)?;
                d.set_item("kind", e.kind.as_str())?;
                d.set_item("row_count", e.row_count)?;
                d.set_item("created_at", e.created_at)?;
                let parents: Vec<String> = e
                    .parents
                    .iter()
                    .map(|p| match &p.named {
                        Some((n, v)) => format!("{n}.v{v}"),
                        None => p.fingerprint.clone(),
                    })
                    .collect();
                d.set_item("parents", parents)?;
                Ok(d)
            })
            .collect()
    }

    #[pyo3(signature = (root = None))]
    fn find_stale(&self, root: Option<&str>) -> PyResult<Vec<String>> {
        Ok(self
            .inner
            .find_stale(root)
            .py()?
            .into_iter()
            .map(|r| r.name)
            .collect())
    }

    /// Deletes versions unreachable from `keep`; returns bytes freed.
    fn gc(&self, keep: Vec<String>) -> PyResult<u64> {
        let keep = keep.iter().map(|k| parse_ref(k)).collect::<PyResult<Vec<_>>>()?;
        self.inner.gc(&keep).py()
    }

    fn __repr__(&self) -> String {
        format!("Catalog({:?})", self.inner.root())
    }
}

/// Executes operations; samples are read through an optional local cache.
#[pyclass(frozen, module = "dfkit")]
struct Engine {
    inner: engine::Engine,
}

#[pymethods]
impl Engine {
    #[new]
    #[pyo3(signature = (cache_dir = None, workers = None, batch_size = None))]
    fn new(cache_dir: Option<PathBuf>, workers: Option<usize>, batch_size: Option<usize>) -> PyResult<Self> {
        let mut cfg = EngineConfig::default();
        if let Some(w) = workers {
            cfg.workers = w.max(1);
        }
        if let Some(b) = batch_size {
            cfg.batch_size = b.max(1);
        }
        let samples = match cache_dir {
            Some(dir) => {
                let cache = Cache::new(CacheConfig::from_env(dir).py()?, Storage::default()).py()?;
                SampleSource::Cached(Arc::new(cache))
            }
            None => SampleSource::Direct(Storage::default()),
        };
        Ok(Engine {
            inner: engine::Engine::new(samples, cfg),
        })
    }

    /// Indexes `archives` and joins each to the sidecar at the same position.
    #[pyo3(signature = (archives, sidecars = None, coerce_text = false))]
    fn etl(&self, py: Python<'_>, archives: Vec<String>, sidecars: Option<Vec<String>>, coerce_text: bool) -> PyResult<Dataset> {
        let sidecars = sidecars.unwrap_or_default();
        if !sidecars.is_empty() && sidecars.len() != archives.len() {
            return Err(UserError::new_err("give one sidecar per archive"));
        }
        let sources: Vec<EtlSource> = archives
            .into_iter()
            .enumerate()
            .map(|(i, a)| EtlSource::new(a, sidecars.get(i).cloned()))
            .collect();
        let inner = py.allow_threads(|| self.inner.etl_build(&sources, coerce_text)).py()?;
        Ok(Dataset { inner })
    }

    #[pyo3(signature = (ds, predicate, params = None))]
    fn filter(&self, ds: &Dataset, predicate: &str, params: Option<&Bound<'_, PyDict>>) -> PyResult<Dataset> {
        let params = params_from_py(params)?;
        Ok(Dataset {
            inner: self.inner.filter(&ds.inner, predicate, &params).py()?,
        })
    }

    #[pyo3(signature = (ds, column, expr, params = None))]
    fn mutate(&self, ds: &Dataset, column: &str, expr: &str, params: Option<&Bound<'_, PyDict>>) -> PyResult<Dataset> {
        let params = params_from_py(params)?;
        Ok(Dataset {
            inner: self.inner.mutate(&ds.inner, column, expr, &params).py()?,
        })
    }

    /// Adds the output column of a builtin UDF, or of a subprocess UDF when
    /// `command` is given (then `outputs` is `[(name, type), ...]`).
    #[pyo3(signature = (ds, udf, column = None, command = None, outputs = None, version = "1"))]
    fn add_signals(
        &self,
        py: Python<'_>,
        ds: &Dataset,
        udf: &str,
        column: Option<&str>,
        command: Option<Vec<String>>,
        outputs: Option<Vec<(String, String)>>,
        version: &str,
    ) -> PyResult<Dataset> {
        let spec = match command {
            None => {
                let spec = UdfSpec::builtin(udf).py()?;
                match column {
                    Some(c) => spec.with_output_name(c),
                    None => spec,
                }
            }
            Some(argv) => {
                let outputs = outputs
                    .unwrap_or_default()
                    .into_iter()
                    .map(|(n, t)| Ok((n, t.parse().py()?)))
                    .collect::<PyResult<Vec<_>>>()?;
                if outputs.is_empty() {
                    return Err(UserError::new_err("a subprocess UDF needs outputs"));
                }
                UdfSpec::subprocess(udf, version, argv, outputs)
            }
        };
        let inner = py
            .allow_threads(|| self.inner.add_signals(&ds.inner, &spec, &Params::new()))
            .py()?;
        Ok(Dataset { inner })
    }

    #[pyo3(signature = (ds, key, descending = false, limit = None))]
    fn order_limit(&self, ds: &Dataset, key: &str, descending: bool, limit: Option<u64>) -> PyResult<Dataset> {
        Ok(Dataset {
            inner: self.inner.order_limit(&ds.inner, key, descending, limit).py()?,
        })
    }

    fn union(&self, a: &Dataset, b: &Dataset) -> PyResult<Dataset> {
        Ok(Dataset {
            inner: self.inner.union(&a.inner, &b.inner).py()?,
        })
    }

    /// Rows handed to UDFs by this engine so far.
    #[getter]
    fn udf_rows_processed(&self) -> u64 {
        self.inner.udf_rows_processed()
    }
}

/// Runs the out-of-date stages of a pipeline file and returns one dict per
/// stage. Raises on the first stage failure after recording the rest.
#[pyfunction]
#[pyo3(signature = (catalog, path, engine = None, force = false))]
fn run_pipeline<'py>(
    py: Python<'py>,
    catalog: &Catalog,
    path: PathBuf,
    engine: Option<&Engine>,
    force: bool,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let p = Pipeline::load(&path).py()?;
    let default_engine;
    let engine = match engine {
        Some(e) => &e.inner,
        None => {
            default_engine = engine::Engine::direct(Storage::default());
            &default_engine
        }
    };
    let report = py.allow_threads(|| pipeline::run_pipeline(&catalog.inner, engine, &p, RunOptions { force }));
    if let Some(e) = report.error {
        return Err(to_py(e));
    }
    report
        .stages
        .iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("name", &s.name)?;
            d.set_item("kind", s.kind.as_str())?;
            d.set_item("rows_processed", s.rows_processed)?;
            d.set_item("udf_rows", s.udf_rows)?;
            d.set_item("output_rows", s.output_rows)?;
            match &s.status {
                StageStatus::Executed { mode, version, .. } => {
                    d.set_item("status", "executed")?;
                    d.set_item("mode", if *mode == ExecMode::Incremental { "incremental" } else { "full" })?;
                    d.set_item("version", version)?;
                }
                StageStatus::Skipped { version } => {
                    d.set_item("status", "skipped")?;
                    d.set_item("version", version)?;
                }
                StageStatus::Failed { error } => {
                    d.set_item("status", "failed")?;
                    d.set_item("error", error)?;
                }
                StageStatus::Blocked { by } => {
                    d.set_item("status", "blocked")?;
                    d.set_item("blocked_by", by)?;
                }
            }
            Ok(d)
        })
        .collect()
}

/// Export manifest (JSONL text) for shard `rank` of `world`.
#[pyfunction]
#[pyo3(signature = (ds, columns, seed = 0, rank = 0, world = 1, label = "dataset"))]
fn export(ds: &Dataset, columns: Vec<String>, seed: u64, rank: u32, world: u32, label: &str) -> PyResult<String> {
    Ok(dfkit_core::export::export(&ds.inner, label, &columns, seed, rank, world)
        .py()?
        .to_jsonl())
}

/// Canonical text of an expression, or `UserError` with the position.
#[pyfunction]
fn parse_expr(src: &str) -> PyResult<String> {
    Ok(dfkit_core::expr::parse(src).py()?.to_string())
}

/// Evaluates a builtin UDF on raw bytes.
#[pyfunction]
fn run_builtin<'py>(py: Python<'py>, udf: &str, sample: &[u8]) -> PyResult<Bound<'py, PyAny>> {
    value_to_py(py, &engine::run_builtin(udf, sample).py()?)
}

/// Writes the synthetic tar + JSONL fixture; returns `[(archive, sidecar)]`.
#[pyfunction]
#[pyo3(signature = (out, shards = 2, members = 100, seed = 7))]
fn make_fixture(out: PathBuf, shards: usize, members: usize, seed: u64) -> PyResult<Vec<(PathBuf, PathBuf)>> {
    let fx = dfkit_core::fixture::DatasetFixture {
        shards,
        members_per_shard: members,
        seed,
        ..Default::default()
    };
    Ok(fx
        .generate(&out)
        .py()?
        .into_iter()
        .map(|s| (s.archive, s.sidecar))
        .collect())
}

#[pymodule]
pub fn dfkit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add_class::<Catalog>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Engine>()?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(export, m)?)?;
    m.add_function(wrap_pyfunction!(parse_expr, m)?)?;
    m.add_function(wrap_pyfunction!(run_builtin, m)?)?;
    m.add_function(wrap_pyfunction!(make_fixture, m)?)?;
    m.add("DfError", py.get_type::<DfError>())?;
    m.add("UserError", py.get_type::<UserError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("StorageError", py.get_type::<StorageError>())?;
    Ok(())
}
