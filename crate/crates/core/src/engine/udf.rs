use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::ops::{canonical_params, derive};
use super::protocol::UdfProcess;
use super::{Engine, OperationDescriptor, StageKind};
use crate::canonical::to_canonical_string;
use crate::error::{Error, Result};
use crate::expr::Params;
use crate::table::{ColumnType, ColumnVector, Dataset, Field, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UdfMode {
    Builtin,
    Subprocess { command: Vec<String> },
}

/// A user-defined function producing one or more signal columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UdfSpec {
    pub udf_id: String,
    pub udf_version: String,
    pub mode: UdfMode,
    pub outputs: Vec<Field>,
    pub needs_sample_bytes: bool,
    pub input_columns: Vec<String>,
    pub batch_size: u32,
}

const BUILTINS: [(&str, &str, ColumnType); 3] = [
    ("byte_len", "byte_len", ColumnType::Int64),
    ("sha256_hex", "sha256", ColumnType::Utf8),
    ("hist_embed", "embed", ColumnType::FVec(256)),
];

pub fn builtin_ids() -> impl Iterator<Item = &'static str> {
    BUILTINS.iter().map(|(id, _, _)| *id)
}

impl UdfSpec {
    /// A builtin with its default output column name.
    pub fn builtin(id: &str) -> Result<Self> {
        let (_, column, ty) = BUILTINS
            .iter()
            .find(|(b, _, _)| *b == id)
            .ok_or_else(|| Error::UnknownUdf(id.to_string()))?;
        Ok(UdfSpec {
            udf_id: id.to_string(),
            udf_version: "1".into(),
            mode: UdfMode::Builtin,
            outputs: vec![Field::new(*column, *ty, true)],
            needs_sample_bytes: true,
            input_columns: Vec::new(),
            batch_size: 64,
        })
    }

    pub fn subprocess(
        id: &str,
        version: &str,
        command: Vec<String>,
        outputs: Vec<(String, ColumnType)>,
    ) -> Self {
        UdfSpec {
            udf_id: id.to_string(),
            udf_version: version.to_string(),
            mode: UdfMode::Subprocess { command },
            outputs: outputs
                .into_iter()
                .map(|(n, t)| Field::new(n, t, true))
                .collect(),
            needs_sample_bytes: true,
            input_columns: Vec::new(),
            batch_size: 64,
        }
    }

    /// Renames the single output column of a builtin.
    pub fn with_output_name(mut self, name: &str) -> Self {
        if let [f] = self.outputs.as_mut_slice() {
            f.name = name.to_string();
        }
        self
    }

    pub fn command(&self) -> Option<&[String]> {
        match &self.mode {
            UdfMode::Subprocess { command } => Some(command),
            UdfMode::Builtin => None,
        }
    }

    /// SHA-256 of the canonical JSON argv; part of the UDF's identity.
    pub fn command_sha256(&self) -> Option<String> {
        self.command().map(|argv| {
            let text = to_canonical_string(argv).expect("argv serializes");
            hex::encode(Sha256::digest(text.as_bytes()))
        })
    }

    pub fn descriptor(&self, params: &Params) -> OperationDescriptor {
        let mut d = OperationDescriptor::new(StageKind::AddSignals);
        d.udf_id = Some(self.udf_id.clone());
        d.udf_version = Some(self.udf_version.clone());
        d.udf_command_sha256 = self.command_sha256();
        d.new_column = Some(
            self.outputs
                .iter()
                .map(|f| f.name.as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
        d.udf_inputs = self.input_columns.clone();
        d.needs_sample_bytes = Some(self.needs_sample_bytes);
        d.params = canonical_params(params);
        d
    }

    fn validate(&self, parent: &Dataset) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::BadArgument("batch size must be >= 1".into()));
        }
        if self.outputs.is_empty() {
            return Err(Error::BadArgument(format!("UDF {} declares no outputs", self.udf_id)));
        }
        for f in &self.outputs {
            super::ops::check_new_column(parent, &f.name)?;
        }
        for c in &self.input_columns {
            if parent.schema().index_of(c).is_none() {
                return Err(Error::UnknownColumn(c.clone()));
            }
        }
        if self.mode == UdfMode::Builtin {
            let (_, _, ty) = BUILTINS
                .iter()
                .find(|(b, _, _)| *b == self.udf_id)
                .ok_or_else(|| Error::UnknownUdf(self.udf_id.clone()))?;
            if self.outputs.len() != 1 || self.outputs[0].ty != *ty {
                return Err(Error::BadArgument(format!(
                    "builtin {} produces one {ty} column",
                    self.udf_id
                )));
            }
        }
        Ok(())
    }
}

/// One row as handed to a UDF.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRow {
    pub uid: String,
    pub sample: Option<Vec<u8>>,
    pub attrs: BTreeMap<String, Value>,
}

/// Evaluates a builtin on one payload.
pub fn run_builtin(id: &str, sample: &[u8]) -> Result<Value> {
    Ok(match id {
        "byte_len" => Value::Int(sample.len() as i64),
        "sha256_hex" => Value::Text(hex::encode(Sha256::digest(sample))),
        "hist_embed" => {
            if sample.is_empty() {
                return Ok(Value::Null);
            }
            let mut counts = [0u64; 256];
            for &b in sample {
                counts[b as usize] += 1;
            }
            let total = sample.len() as f64;
            Value::FVec(counts.iter().map(|&c| (c as f64 / total) as f32).collect())
        }
        other => return Err(Error::UnknownUdf(other.to_string())),
    })
}

enum Executor<'a> {
    Builtin(&'a str),
    Subprocess(Option<UdfProcess>),
}

impl Executor<'_> {
    fn run(&mut self, engine: &Engine, spec: &UdfSpec, params: &Params, rows: &[BatchRow]) -> Result<Vec<Vec<Value>>> {
        match self {
            Executor::Builtin(id) => {
                let values = rows
                    .iter()
                    .map(|r| run_builtin(id, r.sample.as_deref().unwrap_or(&[])))
                    .collect::<Result<Vec<_>>>()?;
                Ok(vec![values])
            }
            Executor::Subprocess(slot) => {
                if slot.is_none() {
                    *slot = Some(UdfProcess::spawn(spec, params, engine.config.udf_timeout)?);
                }
                slot.as_mut().expect("spawned").run_batch(rows)
            }
        }
    }

    fn finish(self) -> Result<()> {
        match self {
            Executor::Subprocess(Some(p)) => p.finish(),
            _ => Ok(()),
        }
    }
}

impl Engine {
    /// Appends the UDF's output columns to `parent`.
    pub fn add_signals(&self, parent: &Dataset, spec: &UdfSpec, params: &Params) -> Result<Dataset> {
        spec.validate(parent)?;
        let rows: Vec<usize> = (0..parent.row_count()).collect();
        let values = self.compute_signals(parent, spec, params, &rows)?;
        let extra = spec
            .outputs
            .iter()
            .zip(values)
            .map(|(f, v)| Ok((f.clone(), ColumnVector::from_values(f.ty, true, &v)?)))
            .collect::<Result<Vec<_>>>()?;
        derive(parent, None, extra, spec.descriptor(params))
    }

    /// Runs the UDF over `rows` of `parent`; returns one value vector per
    /// output column, aligned with `rows`.
    ///
    /// A producer fetches batches (bounded read-ahead) while workers, each
    /// owning at most one child process, evaluate them; results are placed
    /// by batch index so completion order does not matter.
    pub(crate) fn compute_signals(
        &self,
        parent: &Dataset,
        spec: &UdfSpec,
        params: &Params,
        rows: &[usize],
    ) -> Result<Vec<Vec<Value>>> {
        spec.validate_inputs(parent)?;
        let n_out = spec.outputs.len();
        if rows.is_empty() {
            return Ok(vec![Vec::new(); n_out]);
        }
        let batch_size = (spec.batch_size as usize).max(1);
        let batches: Vec<&[usize]> = rows.chunks(batch_size).collect();
        let workers = self.config.workers.clamp(1, batches.len());
        let input_idx: Vec<(String, usize)> = spec
            .input_columns
            .iter()
            .map(|c| (c.clone(), parent.schema().index_of(c).expect("validated")))
            .collect();

        let abort = AtomicBool::new(false);
        let first_error: Mutex<Option<Error>> = Mutex::new(None);
        let fail = |e: Error| {
            abort.store(true, Ordering::SeqCst);
            let mut slot = first_error.lock().unwrap();
            if slot.is_none() {
                *slot = Some(e);
            }
        };
        let results: Mutex<Vec<Option<Vec<Vec<Value>>>>> = Mutex::new(vec![None; batches.len()]);
        let (tx, rx) = mpsc::sync_channel::<(usize, Vec<BatchRow>)>(self.config.readahead.max(1));
        let rx = Mutex::new(rx);

        std::thread::scope(|scope| {
            scope.spawn(|| {
                for (bi, batch) in batches.iter().enumerate() {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let samples = if spec.needs_sample_bytes {
                        let refs: Vec<_> = batch.iter().map(|&r| parent.sample_ref(r)).collect();
                        match self.samples.fetch(&refs) {
                            Ok(s) => s.into_iter().map(Some).collect(),
                            Err(e) => {
                                fail(e);
                                break;
                            }
                        }
                    } else {
                        vec![None; batch.len()]
                    };
                    let rows: Vec<BatchRow> = batch
                        .iter()
                        .zip(samples)
                        .map(|(&r, sample)| BatchRow {
                            uid: parent.uid(r).to_string(),
                            sample,
                            attrs: input_idx
                                .iter()
                                .map(|(name, ci)| (name.clone(), parent.columns()[*ci].value(r)))
                                .collect(),
                        })
                        .collect();
                    if tx.send((bi, rows)).is_err() {
                        break;
                    }
                }
                drop(tx);
            });
            for _ in 0..workers {
                scope.spawn(|| {
                    let mut exec = match &spec.mode {
                        UdfMode::Builtin => Executor::Builtin(&spec.udf_id),
                        UdfMode::Subprocess { .. } => Executor::Subprocess(None),
                    };
                    loop {
                        let next = rx.lock().unwrap().recv();
                        let Ok((bi, rows)) = next else { break };
                        if abort.load(Ordering::SeqCst) {
                            continue; // drain so the producer can finish
                        }
                        match exec.run(self, spec, params, &rows) {
                            Ok(cols) => {
                                self.udf_rows.fetch_add(rows.len() as u64, Ordering::SeqCst);
                                results.lock().unwrap()[bi] = Some(cols);
                            }
                            Err(e) => fail(e),
                        }
                    }
                    if !abort.load(Ordering::SeqCst) {
                        if let Err(e) = exec.finish() {
                            fail(e);
                        }
                    }
                });
            }
        });

        if let Some(e) = first_error.into_inner().unwrap() {
            return Err(e);
        }
        let mut out: Vec<Vec<Value>> = vec![Vec::with_capacity(rows.len()); n_out];
        for cols in results.into_inner().unwrap() {
            for (acc, col) in out.iter_mut().zip(cols.expect("every batch completed")) {
                acc.extend(col);
            }
        }
        Ok(out)
    }
}

impl UdfSpec {
    fn validate_inputs(&self, parent: &Dataset) -> Result<()> {
        for c in &self.input_columns {
            if parent.schema().index_of(c).is_none() {
                return Err(Error::UnknownColumn(c.clone()));
            }
        }
        Ok(())
    }

    pub(crate) fn validate_for(&self, parent: &Dataset) -> Result<()> {
        self.validate(parent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins() {
        assert_eq!(run_builtin("byte_len", &[1; 100]).unwrap(), Value::Int(100));
        assert_eq!(
            run_builtin("sha256_hex", b"abc").unwrap(),
            Value::Text("ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad".into())
        );
        let Value::FVec(h) = run_builtin("hist_embed", &[0xAB; 100]).unwrap() else {
            panic!("expected a vector");
        };
        assert_eq!(h.len(), 256);
        assert_eq!(h[171], 1.0);
        assert_eq!(h.iter().sum::<f32>(), 1.0);
        assert_eq!(run_builtin("hist_embed", &[]).unwrap(), Value::Null);
        assert!(matches!(run_builtin("nope", &[]), Err(Error::UnknownUdf(_))));
    }

    #[test]
    fn command_hash_changes_identity() {
        let a = UdfSpec::subprocess("u", "1", vec!["a".into()], vec![("x".into(), ColumnType::Int64)]);
        let b = UdfSpec::subprocess("u", "1", vec!["b".into()], vec![("x".into(), ColumnType::Int64)]);
        assert_ne!(a.descriptor(&Params::new()), b.descriptor(&Params::new()));
        assert_eq!(UdfSpec::builtin("hist_embed").unwrap().command_sha256(), None);
    }
}
