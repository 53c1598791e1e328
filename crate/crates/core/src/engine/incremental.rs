use super::ops::{derive, matches, predicate, prepare};
use super::{Engine, Stage};
use crate::error::{Error, Result};
use crate::expr::{eval, TableRow};
use crate::table::{ColumnVector, Dataset, Field, Value};

/// Outcome of an incremental application.
#[derive(Debug, Clone)]
pub struct IncrementalOutput {
    pub dataset: Dataset,
    /// Rows the stage actually evaluated (the delta).
    pub delta_rows: usize,
    pub removed_rows: usize,
}

impl Engine {
    /// Re-applies a row-local stage to `new_parent`, reusing `old_output`
    /// for every row that `old_parent` already had unchanged.
    ///
    /// The result equals a full recomputation over `new_parent`, row order
    /// and fingerprint included.
    pub fn incremental_apply(
        &self,
        stage: &Stage,
        old_parent: &Dataset,
        new_parent: &Dataset,
        old_output: &Dataset,
    ) -> Result<IncrementalOutput> {
        let kind = stage.kind();
        if !kind.is_row_local() {
            return Err(Error::NotRowLocal(kind.to_string()));
        }
        let descriptor = stage.descriptor(self)?;
        if descriptor != old_output.operation {
            return Err(Error::DescriptorMismatch(format!(
                "stage {kind} differs from the descriptor that produced the old output"
            )));
        }
        if old_output.parents != [old_parent.fingerprint.clone()] {
            return Err(Error::DescriptorMismatch(
                "old output was not derived from the given old parent".into(),
            ));
        }
        if old_parent.schema() != new_parent.schema() {
            return Err(Error::SchemaMismatch(
                "old and new parent schemas differ; recompute fully".into(),
            ));
        }

        let old_rows = old_parent.uid_index();
        let out_rows = old_output.uid_index();
        // A row is reusable when the old parent had it with identical values
        // and the old output has a verdict for it.
        let reusable = |j: usize| -> Option<Option<usize>> {
            let uid = new_parent.uid(j);
            let &i = old_rows.get(uid)?;
            let same = new_parent
                .columns()
                .iter()
                .zip(old_parent.columns())
                .all(|(a, b)| a.value(j) == b.value(i));
            same.then(|| out_rows.get(uid).copied())
        };
        let new_uids: std::collections::HashSet<&str> = new_parent.uids().into_iter().collect();
        let removed_rows = old_parent
            .uids()
            .into_iter()
            .filter(|u| !new_uids.contains(u))
            .count();

        let (dataset, delta_rows) = match stage {
            Stage::Filter { expr, params } => {
                let (typed, _, _) = prepare(expr, new_parent.schema(), params)?;
                predicate(&typed)?;
                let mut keep = Vec::new();
                let mut delta = 0;
                for j in 0..new_parent.row_count() {
                    let include = match reusable(j) {
                        Some(prev) => prev.is_some(),
                        None => {
                            delta += 1;
                            matches(&typed, new_parent, j)
                        }
                    };
                    if include {
                        keep.push(j);
                    }
                }
                (derive(new_parent, Some(&keep), Vec::new(), descriptor)?, delta)
            }
            Stage::Mutate {
                column,
                expr,
                params,
            } => {
                super::ops::check_new_column(new_parent, column)?;
                let (typed, _, _) = prepare(expr, new_parent.schema(), params)?;
                let old_col = old_output
                    .column(column)
                    .ok_or_else(|| Error::DescriptorMismatch(format!("old output lacks {column}")))?;
                let mut delta = 0;
                let values: Vec<Value> = (0..new_parent.row_count())
                    .map(|j| match reusable(j) {
                        Some(Some(i)) => old_col.value(i),
                        _ => {
                            delta += 1;
                            eval(
                                &typed,
                                &TableRow {
                                    columns: new_parent.columns(),
                                    row: j,
                                },
                            )
                        }
                    })
                    .collect();
                let col = ColumnVector::from_values(typed.ty, true, &values)?;
                let field = Field::new(column.as_str(), typed.ty, true);
                (derive(new_parent, None, vec![(field, col)], descriptor)?, delta)
            }
            Stage::AddSignals { udf, params } => {
                udf.validate_for(new_parent)?;
                let mut values: Vec<Vec<Value>> =
                    vec![vec![Value::Null; new_parent.row_count()]; udf.outputs.len()];
                let old_cols = udf
                    .outputs
                    .iter()
                    .map(|f| {
                        old_output.column(&f.name).ok_or_else(|| {
                            Error::DescriptorMismatch(format!("old output lacks {}", f.name))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut delta = Vec::new();
                for j in 0..new_parent.row_count() {
                    match reusable(j) {
                        Some(Some(i)) => {
                            for (acc, col) in values.iter_mut().zip(&old_cols) {
                                acc[j] = col.value(i);
                            }
                        }
                        _ => delta.push(j),
                    }
                }
                let computed = self.compute_signals(new_parent, udf, params, &delta)?;
                for (acc, col) in values.iter_mut().zip(computed) {
                    for (&j, v) in delta.iter().zip(col) {
                        acc[j] = v;
                    }
                }
                let extra = udf
                    .outputs
                    .iter()
                    .zip(values)
                    .map(|(f, v)| Ok((f.clone(), ColumnVector::from_values(f.ty, true, &v)?)))
                    .collect::<Result<Vec<_>>>()?;
                (derive(new_parent, None, extra, descriptor)?, delta.len())
            }
            _ => unreachable!("row-local kinds handled above"),
        };
        Ok(IncrementalOutput {
            dataset,
            delta_rows,
            removed_rows,
        })
    }
}
