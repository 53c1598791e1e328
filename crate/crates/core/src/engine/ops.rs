use std::cmp::Ordering;
use std::collections::HashSet;

use super::{Engine, OperationDescriptor, StageKind};
use crate::error::{Error, Result};
use crate::expr::{self, eval, typecheck, Params, TableRow, TypedExpr};
use crate::table::{is_identifier, ColumnType, ColumnVector, Dataset, Field, Value};

/// Parses and typechecks `src`; returns the canonical printed form and the
/// bindings it actually references.
pub(crate) fn prepare(
    src: &str,
    schema: &crate::table::Schema,
    params: &Params,
) -> Result<(TypedExpr, String, Params)> {
    let ast = expr::parse(src)?;
    let typed = typecheck(&ast, schema, params)?;
    let mut used = Params::new();
    for name in ast.params() {
        let v = params.get(&name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
        used.insert(name, v.clone());
    }
    Ok((typed, ast.to_string(), used))
}

pub(crate) fn canonical_params(params: &Params) -> std::collections::BTreeMap<String, String> {
    params
        .iter()
        .map(|(k, v)| (k.clone(), v.canonical_text()))
        .collect()
}

pub(crate) fn filter_descriptor(canonical_src: String, used: &Params) -> OperationDescriptor {
    let mut d = OperationDescriptor::new(StageKind::Filter);
    d.expression_src = Some(canonical_src);
    d.params = canonical_params(used);
    d
}

pub(crate) fn mutate_descriptor(column: &str, canonical_src: String, used: &Params) -> OperationDescriptor {
    let mut d = OperationDescriptor::new(StageKind::Mutate);
    d.new_column = Some(column.to_string());
    d.expression_src = Some(canonical_src);
    d.params = canonical_params(used);
    d
}

pub(crate) fn check_new_column(parent: &Dataset, column: &str) -> Result<()> {
    if parent.schema().index_of(column).is_some() {
        return Err(Error::ColumnExists(column.to_string()));
    }
    if !is_identifier(column) || column.starts_with('_') {
        return Err(Error::BadArgument(format!("invalid column name {column:?}")));
    }
    Ok(())
}

pub(crate) fn predicate(typed: &TypedExpr) -> Result<()> {
    if typed.ty != ColumnType::Bool {
        return Err(Error::TypeMismatch {
            context: "filter predicate".into(),
            left: typed.ty.to_string(),
            right: "bool".into(),
        });
    }
    Ok(())
}

pub(crate) fn matches(typed: &TypedExpr, ds: &Dataset, row: usize) -> bool {
    eval(
        typed,
        &TableRow {
            columns: ds.columns(),
            row,
        },
    ) == Value::Bool(true)
}

/// Assembles a child of `parent` keeping `rows` and appending `extra`.
pub(crate) fn derive(
    parent: &Dataset,
    rows: Option<&[usize]>,
    extra: Vec<(Field, ColumnVector)>,
    operation: OperationDescriptor,
) -> Result<Dataset> {
    let (mut columns, mut origins) = match rows {
        Some(r) => parent.select_rows(r),
        None => (parent.columns().to_vec(), parent.origins().to_vec()),
    };
    let mut schema = parent.schema().clone();
    for (field, col) in extra {
        schema = schema.with_field(field)?;
        columns.push(col);
        origins.push(None);
    }
    let mut ds = Dataset::new(schema, columns, origins, vec![parent.fingerprint.clone()], operation)?;
    ds.lineage = parent.lineage_for_child();
    Ok(ds)
}

impl Engine {
    /// Rows where `predicate` is true, in parent order.
    pub fn filter(&self, parent: &Dataset, predicate_src: &str, params: &Params) -> Result<Dataset> {
        let (typed, canonical, used) = prepare(predicate_src, parent.schema(), params)?;
        predicate(&typed)?;
        let rows: Vec<usize> = (0..parent.row_count())
            .filter(|&r| matches(&typed, parent, r))
            .collect();
        derive(parent, Some(&rows), Vec::new(), filter_descriptor(canonical, &used))
    }

    /// Appends `column`, computed per row; other columns are shared.
    pub fn mutate(&self, parent: &Dataset, column: &str, value_src: &str, params: &Params) -> Result<Dataset> {
        check_new_column(parent, column)?;
        let (typed, canonical, used) = prepare(value_src, parent.schema(), params)?;
        let values: Vec<Value> = (0..parent.row_count())
            .map(|row| {
                eval(
                    &typed,
                    &TableRow {
                        columns: parent.columns(),
                        row,
                    },
                )
            })
            .collect();
        let col = ColumnVector::from_values(typed.ty, true, &values)?;
        derive(
            parent,
            None,
            vec![(Field::new(column, typed.ty, true), col)],
            mutate_descriptor(column, canonical, &used),
        )
    }

    /// Stable sort on `key` (nulls last, ties by `_uid`), then the first
    /// `limit` rows.
    pub fn order_limit(&self, parent: &Dataset, key: &str, descending: bool, limit: Option<u64>) -> Result<Dataset> {
        let idx = parent
            .schema()
            .index_of(key)
            .ok_or_else(|| Error::UnknownColumn(key.to_string()))?;
        let ty = parent.schema().fields()[idx].ty;
        if matches!(ty, ColumnType::Bytes | ColumnType::FVec(_)) {
            return Err(Error::NonOrderableType {
                column: key.to_string(),
                ty: ty.to_string(),
            });
        }
        let col = &parent.columns()[idx];
        let keys: Vec<Value> = col.values();
        let mut rows: Vec<usize> = (0..parent.row_count()).collect();
        rows.sort_by(|&a, &b| {
            let primary = match (&keys[a], &keys[b]) {
                (Value::Null, Value::Null) => Ordering::Equal,
                (Value::Null, _) => Ordering::Greater,
                (_, Value::Null) => Ordering::Less,
                (x, y) => {
                    let o = compare(x, y);
                    if descending {
                        o.reverse()
                    } else {
                        o
                    }
                }
            };
            primary.then_with(|| parent.uid(a).cmp(parent.uid(b)))
        });
        if let Some(limit) = limit {
            rows.truncate(usize::try_from(limit).unwrap_or(usize::MAX));
        }
        let mut d = OperationDescriptor::new(StageKind::OrderLimit);
        d.order_key = Some(key.to_string());
        d.descending = Some(descending);
        d.limit = limit;
        derive(parent, Some(&rows), Vec::new(), d)
    }

    /// Rows of `a` followed by rows of `b`.
    pub fn union(&self, a: &Dataset, b: &Dataset) -> Result<Dataset> {
        if a.schema() != b.schema() {
            return Err(Error::SchemaMismatch(format!(
                "{} columns vs {} columns",
                a.schema().len(),
                b.schema().len()
            )));
        }
        let seen: HashSet<&str> = a.uids().into_iter().collect();
        if let Some(dup) = b.uids().into_iter().find(|u| seen.contains(u)) {
            return Err(Error::DuplicateUid(dup.to_string()));
        }
        let columns = a
            .columns()
            .iter()
            .zip(b.columns())
            .map(|(x, y)| ColumnVector::concat(&[x, y]))
            .collect::<Result<Vec<_>>>()?;
        let origins = vec![None; columns.len()];
        let mut ds = Dataset::new(
            a.schema().clone(),
            columns,
            origins,
            vec![a.fingerprint.clone(), b.fingerprint.clone()],
            OperationDescriptor::new(StageKind::Union),
        )?;
        let mut lineage = a.lineage_for_child();
        for node in b.lineage_for_child() {
            if !lineage.iter().any(|n| n.fingerprint == node.fingerprint) {
                lineage.push(node);
            }
        }
        ds.lineage = lineage;
        Ok(ds)
    }
}

fn compare(a: &Value, b: &Value) -> Ordering {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => x.cmp(y),
        (Value::Float(x), Value::Float(y)) => x.total_cmp(y),
        (Value::Bool(x), Value::Bool(y)) => x.cmp(y),
        (Value::Text(x), Value::Text(y)) => x.cmp(y),
        _ => Ordering::Equal,
    }
}
