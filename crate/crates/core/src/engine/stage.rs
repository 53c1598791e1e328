use super::etl::etl_descriptor;
use super::ops::{filter_descriptor, mutate_descriptor};
use super::{Engine, EtlSource, OperationDescriptor, StageKind, UdfSpec};
use crate::error::{Error, Result};
use crate::expr::{self, Params};
use crate::table::Dataset;

/// A stage definition that can be executed, re-described and replayed.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Etl {
        sources: Vec<EtlSource>,
        coerce_text: bool,
    },
    Filter {
        expr: String,
        params: Params,
    },
    Mutate {
        column: String,
        expr: String,
        params: Params,
    },
    AddSignals {
        udf: UdfSpec,
        params: Params,
    },
    OrderLimit {
        key: String,
        descending: bool,
        limit: Option<u64>,
    },
    Union,
}

fn used_params(src: &str, params: &Params) -> Result<(String, Params)> {
    let ast = expr::parse(src)?;
    let mut used = Params::new();
    for name in ast.params() {
        let v = params.get(&name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
        used.insert(name, v.clone());
    }
    Ok((ast.to_string(), used))
}

impl Stage {
    pub fn kind(&self) -> StageKind {
        match self {
            Stage::Etl { .. } => StageKind::Etl,
            Stage::Filter { .. } => StageKind::Filter,
            Stage::Mutate { .. } => StageKind::Mutate,
            Stage::AddSignals { .. } => StageKind::AddSignals,
            Stage::OrderLimit { .. } => StageKind::OrderLimit,
            Stage::Union => StageKind::Union,
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Stage::Etl { .. } => 0,
            Stage::Union => 2,
            _ => 1,
        }
    }

    /// The descriptor this stage would record, computed without running it.
    /// ETL stats its sources (no payload reads).
    pub fn descriptor(&self, engine: &Engine) -> Result<OperationDescriptor> {
        Ok(match self {
            Stage::Etl {
                sources,
                coerce_text,
            } => etl_descriptor(engine.storage(), sources, *coerce_text)?,
            Stage::Filter { expr, params } => {
                let (canonical, used) = used_params(expr, params)?;
                filter_descriptor(canonical, &used)
            }
            Stage::Mutate {
                column,
                expr,
                params,
            } => {
                let (canonical, used) = used_params(expr, params)?;
                mutate_descriptor(column, canonical, &used)
            }
            Stage::AddSignals { udf, params } => udf.descriptor(params),
            Stage::OrderLimit {
                key,
                descending,
                limit,
            } => {
                let mut d = OperationDescriptor::new(StageKind::OrderLimit);
                d.order_key = Some(key.clone());
                d.descending = Some(*descending);
                d.limit = *limit;
                d
            }
            Stage::Union => OperationDescriptor::new(StageKind::Union),
        })
    }

    /// Full (non-incremental) execution.
    pub fn run(&self, engine: &Engine, inputs: &[&Dataset]) -> Result<Dataset> {
        if inputs.len() != self.arity() {
            return Err(Error::BadPipeline(format!(
                "{} takes {} input(s), got {}",
                self.kind(),
                self.arity(),
                inputs.len()
            )));
        }
        match self {
            Stage::Etl {
                sources,
                coerce_text,
            } => engine.etl_build(sources, *coerce_text),
            Stage::Filter { expr, params } => engine.filter(inputs[0], expr, params),
            Stage::Mutate {
                column,
                expr,
                params,
            } => engine.mutate(inputs[0], column, expr, params),
            Stage::AddSignals { udf, params } => engine.add_signals(inputs[0], udf, params),
            Stage::OrderLimit {
                key,
                descending,
                limit,
            } => engine.order_limit(inputs[0], key, *descending, *limit),
            Stage::Union => engine.union(inputs[0], inputs[1]),
        }
    }
}
