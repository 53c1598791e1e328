use std::collections::HashMap;

use super::{ColumnVector, Field, Schema};
use super::{REF_LENGTH, REF_MEMBER_PATH, REF_OFFSET, REF_SOURCE_URI};
use super::{SampleRef, Value};
use crate::catalog::ProvenanceNode;
use crate::engine::OperationDescriptor;
use crate::error::{Error, Result};

/// A materialized dataset version, saved or not.
///
/// Columns that are unchanged from a saved ancestor remember that file
/// (`origins`) so saving references it instead of writing a copy.
#[derive(Debug, Clone)]
pub struct Dataset {
    schema: Schema,
    columns: Vec<ColumnVector>,
    origins: Vec<Option<String>>,
    row_count: usize,
    pub fingerprint: String,
    pub parents: Vec<String>,
    pub operation: OperationDescriptor,
    /// `(name, version)` once stored in a catalog.
    pub saved_as: Option<(String, u32)>,
    /// Unsaved ancestors whose provenance must be recorded on save.
    pub lineage: Vec<ProvenanceNode>,
}

impl Dataset {
    /// Builds a dataset and computes its fingerprint.
    pub fn new(
        schema: Schema,
        columns: Vec<ColumnVector>,
        origins: Vec<Option<String>>,
        parents: Vec<String>,
        operation: OperationDescriptor,
    ) -> Result<Self> {
        if columns.len() != schema.len() || origins.len() != schema.len() {
            return Err(Error::InvariantViolation(format!(
                "{} columns for {} schema fields",
                columns.len(),
                schema.len()
            )));
        }
        let row_count = columns.first().map_or(0, |c| c.len());
        for (f, c) in schema.fields().iter().zip(&columns) {
            if c.len() != row_count {
                return Err(Error::InvariantViolation(format!(
                    "column {} has {} rows, expected {row_count}",
                    f.name,
                    c.len()
                )));
            }
            if c.column_type() != f.ty || c.nullable() != f.nullable {
                return Err(Error::InvariantViolation(format!(
                    "column {} does not match its schema field",
                    f.name
                )));
            }
        }
        let uids = &columns[0];
        let mut seen = std::collections::HashSet::with_capacity(row_count);
        for i in 0..row_count {
            let uid = uids.str_at(i).ok_or_else(|| Error::InvariantViolation("null _uid".into()))?;
            if !seen.insert(uid) {
                return Err(Error::InvariantViolation(format!("duplicate _uid {uid}")));
            }
        }
        let fingerprint = crate::catalog::fingerprint(&parents, &operation, &schema)?;
        Ok(Dataset {
            schema,
            columns,
            origins,
            row_count,
            fingerprint,
            parents,
            operation,
            saved_as: None,
            lineage: Vec::new(),
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn columns(&self) -> &[ColumnVector] {
        &self.columns
    }

    pub fn origins(&self) -> &[Option<String>] {
        &self.origins
    }

    pub fn row_count(&self) -> usize {
        self.row_count
    }

    pub fn column(&self, name: &str) -> Option<&ColumnVector> {
        self.schema.index_of(name).map(|i| &self.columns[i])
    }

    pub fn uid(&self, row: usize) -> &str {
        self.columns[0].str_at(row).expect("_uid is never null")
    }

    pub fn uids(&self) -> Vec<&str> {
        (0..self.row_count).map(|i| self.uid(i)).collect()
    }

    pub fn uid_index(&self) -> HashMap<&str, usize> {
        (0..self.row_count).map(|i| (self.uid(i), i)).collect()
    }

    pub fn sample_ref(&self, row: usize) -> SampleRef {
        let get_str = |n: &str| self.column(n).and_then(|c| c.str_at(row)).unwrap_or("").to_string();
        let get_int = |n: &str| self.column(n).and_then(|c| c.i64_at(row)).unwrap_or(0) as u64;
        SampleRef {
            source_uri: get_str(REF_SOURCE_URI),
            member_path: get_str(REF_MEMBER_PATH),
            offset: get_int(REF_OFFSET),
            length: get_int(REF_LENGTH),
        }
    }

    pub fn row_values(&self, row: usize) -> Vec<Value> {
        self.columns.iter().map(|c| c.value(row)).collect()
    }

    /// Columns restricted to `rows`, keeping file origins when the selection
    /// is the identity.
    pub fn select_rows(&self, rows: &[usize]) -> (Vec<ColumnVector>, Vec<Option<String>>) {
        let identity = rows.len() == self.row_count && rows.iter().enumerate().all(|(i, &r)| i == r);
        if identity {
            return (self.columns.clone(), self.origins.clone());
        }
        (
            self.columns.iter().map(|c| c.take(rows)).collect(),
            vec![None; self.columns.len()],
        )
    }

    /// The provenance node describing this dataset.
    pub fn provenance(&self) -> ProvenanceNode {
        ProvenanceNode {
            fingerprint: self.fingerprint.clone(),
            parents: self.parents.clone(),
            descriptor: self.operation.clone(),
            schema: self.schema.clone(),
            name: self.saved_as.as_ref().map(|(n, _)| n.clone()),
            version: self.saved_as.as_ref().map(|(_, v)| *v),
        }
    }

    /// Provenance this dataset contributes to a child: nothing if saved,
    /// otherwise its own node plus its unsaved ancestors.
    pub fn lineage_for_child(&self) -> Vec<ProvenanceNode> {
        if self.saved_as.is_some() {
            return Vec::new();
        }
        let mut out = self.lineage.clone();
        out.push(self.provenance());
        out
    }

    pub fn field(&self, name: &str) -> Option<&Field> {
        self.schema.field(name)
    }
}
