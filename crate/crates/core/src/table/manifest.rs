use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Schema;
use crate::canonical::to_canonical_integral;
use crate::engine::OperationDescriptor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One immutable dataset version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub version: u32,
    pub fingerprint: String,
    pub schema: Schema,
    pub row_count: u64,
    /// Column name to file path relative to the catalog root.
    pub column_files: BTreeMap<String, String>,
    pub parents: Vec<String>,
    pub operation: OperationDescriptor,
    pub created_at: String,
}

impl DatasetManifest {
    pub fn to_canonical_json(&self) -> Result<String> {
        to_canonical_integral(self)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.version < 1 {
            return Err("version must be >= 1".into());
        }
        let names: Vec<&str> = self.schema.fields().iter().map(|f| f.name.as_str()).collect();
        let files: Vec<&str> = self.column_files.keys().map(String::as_str).collect();
        let mut sorted = names.clone();
        sorted.sort_unstable();
        if sorted != files {
            return Err("column_files do not match schema".into());
        }
        let expected = crate::catalog::fingerprint(&self.parents, &self.operation, &self.schema)
            .map_err(|e| e.to_string())?;
        if expected != self.fingerprint {
            return Err(format!(
                "fingerprint {} does not match contents ({expected})",
                self.fingerprint
            ));
        }
        Ok(())
    }
}

pub fn write_manifest(m: &DatasetManifest, dir: &Path) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    m.validate().map_err(|reason| Error::CorruptManifest {
        path: path.clone(),
        reason,
    })?;
    std::fs::write(&path, m.to_canonical_json()?)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingManifest(dir.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path.display().to_string(), e)),
    };
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::CorruptManifest {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    m.validate()
        .map_err(|reason| Error::CorruptManifest { path, reason })?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::StageKind;
    use crate::table::{ColumnType, Field};

    fn sample() -> DatasetManifest {
        let schema = Schema::with_attributes(vec![Field::new("size", ColumnType::Int64, true)]).unwrap();
        let mut op = OperationDescriptor::new(StageKind::Filter);
        op.expression_src = Some("(size > 1000)".into());
        let parents = vec!["ab".repeat(32)];
        let fingerprint = crate::catalog::fingerprint(&parents, &op, &schema).unwrap();
        DatasetManifest {
            name: "large".into(),
            version: 1,
            fingerprint,
            column_files: schema
                .fields()
                .iter()
                .map(|f| (f.name.clone(), format!("datasets/large/v1/columns/{}.col", f.name)))
                .collect(),
            schema,
            row_count: 3,
            parents,
            operation: op,
            created_at: "2024-01-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn round_trip_and_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample();
        write_manifest(&m, dir.path()).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
        let bytes = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(bytes, m.to_canonical_json().unwrap());
        assert!(!bytes.contains('\n'));
    }

    #[test]
    fn unsorted_input_is_recanonicalized() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample();
        let pretty = serde_json::to_string_pretty(&serde_json::to_value(&m).unwrap()).unwrap();
        // Reverse top-level key order by hand.
        let v: serde_json::Value = serde_json::from_str(&pretty).unwrap();
        let obj = v.as_object().unwrap();
        let mut shuffled = String::from("{\n");
        let keys: Vec<_> = obj.keys().rev().collect();
        for (i, k) in keys.iter().enumerate() {
            shuffled.push_str(&format!("  {:?}: {}", k, obj[*k]));
            shuffled.push_str(if i + 1 < keys.len() { ",\n" } else { "\n}" });
        }
        std::fs::write(dir.path().join(MANIFEST_FILE), &shuffled).unwrap();
        let read = read_manifest(dir.path()).unwrap();
        assert_eq!(read, m);
        let out = tempfile::tempdir().unwrap();
        write_manifest(&read, out.path()).unwrap();
        assert_eq!(
            std::fs::read(out.path().join(MANIFEST_FILE)).unwrap(),
            m.to_canonical_json().unwrap().into_bytes()
        );
    }

    #[test]
    fn missing_and_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(Error::MissingManifest(_))));
        std::fs::write(dir.path().join(MANIFEST_FILE), "{not json").unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(Error::CorruptManifest { .. })));
        let mut m = sample();
        m.row_count = 4;
        std::fs::write(dir.path().join(MANIFEST_FILE), m.to_canonical_json().unwrap()).unwrap();
        assert!(read_manifest(dir.path()).is_ok());
        m.fingerprint = "00".repeat(32);
        std::fs::write(dir.path().join(MANIFEST_FILE), m.to_canonical_json().unwrap()).unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(Error::CorruptManifest { .. })));
    }
}
