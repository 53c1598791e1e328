use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_integral;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Etl,
    Filter,
    Mutate,
    AddSignals,
    OrderLimit,
    Union,
}

impl StageKind {
    /// Row-local stages map each input row independently and may be
    /// applied to a delta.
    pub fn is_row_local(self) -> bool {
        matches!(self, StageKind::Filter | StageKind::Mutate | StageKind::AddSignals)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Etl => "etl",
            StageKind::Filter => "filter",
            StageKind::Mutate => "mutate",
            StageKind::AddSignals => "add_signals",
            StageKind::OrderLimit => "order_limit",
            StageKind::Union => "union",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SidecarFormat {
    Jsonl,
    Csv,
}

impl std::str::FromStr for SidecarFormat {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(SidecarFormat::Jsonl),
            "csv" => Ok(SidecarFormat::Csv),
            other => Err(crate::Error::BadArgument(format!(
                "unknown sidecar format {other:?} (expected jsonl or csv)"
            ))),
        }
    }
}

/// One ETL input: an archive and the metadata joined to its members.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceSpec {
    pub archive: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<SidecarFormat>,
    /// Archive size observed when the descriptor was built; a changed
    /// object changes the descriptor.
    #[serde(default)]
    pub archive_size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar_size: Option<u64>,
}

/// Canonical definition of the stage that produced a dataset version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationDescriptor {
    pub kind: StageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression_src: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub udf_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub udf_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub udf_command_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub udf_inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub needs_sample_bytes: Option<bool>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descending: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<SourceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coerce_text: Option<bool>,
}

impl OperationDescriptor {
    pub fn new(kind: StageKind) -> Self {
        OperationDescriptor {
            kind,
            expression_src: None,
            new_column: None,
            udf_id: None,
            udf_version: None,
            udf_command_sha256: None,
            udf_inputs: Vec::new(),
            needs_sample_bytes: None,
            params: BTreeMap::new(),
            order_key: None,
            descending: None,
            limit: None,
            sources: Vec::new(),
            coerce_text: None,
        }
    }

    pub fn canonical(&self) -> Result<String> {
        to_canonical_integral(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_is_unique() {
        let mut a = OperationDescriptor::new(StageKind::Filter);
        a.expression_src = Some("size > 1000".into());
        a.params.insert("t".into(), "int64:1".into());
        let b: OperationDescriptor = serde_json::from_str(
            r#"{"params": {"t": "int64:1"}, "expression_src": "size > 1000", "kind": "filter"}"#,
        )
        .unwrap();
        assert_eq!(a.canonical().unwrap(), b.canonical().unwrap());
        assert_eq!(
            a.canonical().unwrap(),
            r#"{"expression_src":"size > 1000","kind":"filter","params":{"t":"int64:1"}}"#
        );
    }
}
