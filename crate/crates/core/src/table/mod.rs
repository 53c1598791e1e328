//! The dataset-as-table model.
//!
//! A dataset version is a set of equally long typed columns. Every table
//! carries `_uid` plus the four physical `_ref.*` columns pointing at the
//! sample's bytes inside its archive; everything else is an attribute.

mod column;
mod dataset;
mod manifest;
mod value;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::canonical::sha256_hex;
use crate::error::{Error, Result};

pub use column::{decode_column, encode_column, Bitmap, ColumnData, ColumnVector, COLUMN_MAGIC};
pub use dataset::Dataset;
pub use manifest::{read_manifest, write_manifest, DatasetManifest, MANIFEST_FILE};
pub use value::Value;

pub const UID: &str = "_uid";
pub const REF_SOURCE_URI: &str = "_ref.source_uri";
pub const REF_MEMBER_PATH: &str = "_ref.member_path";
pub const REF_OFFSET: &str = "_ref.offset";
pub const REF_LENGTH: &str = "_ref.length";

/// Reserved physical columns, in the order they lead every schema.
pub const RESERVED: [(&str, ColumnType); 5] = [
    (UID, ColumnType::Utf8),
    (REF_SOURCE_URI, ColumnType::Utf8),
    (REF_MEMBER_PATH, ColumnType::Utf8),
    (REF_OFFSET, ColumnType::Int64),
    (REF_LENGTH, ColumnType::Int64),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ColumnType {
    Int64,
    Float64,
    Bool,
    Utf8,
    Bytes,
    FVec(u32),
}

impl ColumnType {
    pub fn tag(&self) -> u8 {
        match self {
            ColumnType::Int64 => 0,
            ColumnType::Float64 => 1,
            ColumnType::Bool => 2,
            ColumnType::Utf8 => 3,
            ColumnType::Bytes => 4,
            ColumnType::FVec(_) => 5,
        }
    }

    pub fn from_tag(tag: u8, dim: u32) -> Result<Self> {
        let ty = match tag {
            0 => ColumnType::Int64,
            1 => ColumnType::Float64,
            2 => ColumnType::Bool,
            3 => ColumnType::Utf8,
            4 => ColumnType::Bytes,
            5 => ColumnType::FVec(dim),
            _ => return Err(Error::InvariantViolation(format!("unknown type tag {tag}"))),
        };
        if (tag == 5) != (dim >= 1) {
            return Err(Error::InvariantViolation(format!(
                "type tag {tag} with dim {dim}"
            )));
        }
        Ok(ty)
    }

    pub fn dim(&self) -> u32 {
        match self {
            ColumnType::FVec(d) => *d,
            _ => 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ColumnType::Int64 => "int64",
            ColumnType::Float64 => "float64",
            ColumnType::Bool => "bool",
            ColumnType::Utf8 => "utf8",
            ColumnType::Bytes => "bytes",
            ColumnType::FVec(_) => "fvec",
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, ColumnType::Int64 | ColumnType::Float64)
    }

    fn from_parts(name: &str, dim: u32) -> Result<Self> {
        let ty = match name {
            "int64" => ColumnType::Int64,
            "float64" => ColumnType::Float64,
            "bool" => ColumnType::Bool,
            "utf8" => ColumnType::Utf8,
            "bytes" => ColumnType::Bytes,
            "fvec" => ColumnType::FVec(dim),
            other => return Err(Error::BadSchema(format!("unknown column type {other:?}"))),
        };
        if (name == "fvec") != (dim >= 1) {
            return Err(Error::BadSchema(format!("type {name} with dim {dim}")));
        }
        Ok(ty)
    }
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnType::FVec(d) => write!(f, "fvec({d})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Accepts `int64`, `fvec:64` and `fvec(64)`.
impl FromStr for ColumnType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, dim) = if let Some(rest) = s.strip_prefix("fvec") {
            let digits = rest
                .trim_start_matches([':', '('])
                .trim_end_matches(')');
            let dim = digits
                .parse::<u32>()
                .map_err(|_| Error::BadSchema(format!("bad vector type {s:?}")))?;
            ("fvec", dim)
        } else {
            (s, 0)
        };
        Self::from_parts(name, dim)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub name: String,
    pub ty: ColumnType,
    pub nullable: bool,
}

impl Field {
    pub fn new(name: impl Into<String>, ty: ColumnType, nullable: bool) -> Self {
        Field {
            name: name.into(),
            ty,
            nullable,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FieldRepr {
    name: String,
    #[serde(rename = "type")]
    ty: String,
    dim: u32,
    nullable: bool,
}

impl Serialize for Field {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FieldRepr {
            name: self.name.clone(),
            ty: self.ty.name().to_string(),
            dim: self.ty.dim(),
            nullable: self.nullable,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Field {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = FieldRepr::deserialize(d)?;
        let ty = ColumnType::from_parts(&r.ty, r.dim).map_err(serde::de::Error::custom)?;
        Ok(Field {
            name: r.name,
            ty,
            nullable: r.nullable,
        })
    }
}

pub fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Ordered, validated column list. Always starts with the reserved columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct Schema {
    fields: Vec<Field>,
}

impl<'de> Deserialize<'de> for Schema {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let fields = Vec::<Field>::deserialize(d)?;
        Schema::from_fields(fields).map_err(serde::de::Error::custom)
    }
}

impl Schema {
    /// Reserved columns followed by `attributes`.
    pub fn with_attributes(attributes: Vec<Field>) -> Result<Self> {
        let mut fields: Vec<Field> = RESERVED
            .iter()
            .map(|(n, t)| Field::new(*n, *t, false))
            .collect();
        fields.extend(attributes);
        Self::from_fields(fields)
    }

    pub fn from_fields(fields: Vec<Field>) -> Result<Self> {
        if fields.len() < RESERVED.len() {
            return Err(Error::BadSchema("missing reserved columns".into()));
        }
        for ((name, ty), f) in RESERVED.iter().zip(&fields) {
            if f.name != *name || f.ty != *ty || f.nullable {
                return Err(Error::BadSchema(format!(
                    "reserved column {name} missing or malformed"
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for (i, f) in fields.iter().enumerate() {
            if i >= RESERVED.len() && (!is_identifier(&f.name) || f.name.starts_with("_ref")) {
                return Err(Error::BadSchema(format!("invalid column name {:?}", f.name)));
            }
            if f.name == UID && i != 0 {
                return Err(Error::BadSchema("duplicate _uid".into()));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::BadSchema(format!("duplicate column {:?}", f.name)));
            }
        }
        Ok(Schema { fields })
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    /// Non-reserved columns.
    pub fn attributes(&self) -> &[Field] {
        &self.fields[RESERVED.len()..]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn field(&self, name: &str) -> Option<&Field> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn with_field(&self, field: Field) -> Result<Schema> {
        if self.index_of(&field.name).is_some() {
            return Err(Error::ColumnExists(field.name));
        }
        let mut fields = self.fields.clone();
        fields.push(field);
        Schema::from_fields(fields)
    }
}

/// Pointer to one sample's bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleRef {
    pub source_uri: String,
    pub member_path: String,
    pub offset: u64,
    pub length: u64,
}

impl SampleRef {
    pub fn uid(&self) -> String {
        uid(self)
    }
}

/// SHA-256 over `source_uri NUL member_path NUL offset NUL length`, decimal
/// integers, lowercase hex.
pub fn uid(r: &SampleRef) -> String {
    let mut buf = Vec::with_capacity(r.source_uri.len() + r.member_path.len() + 44);
    buf.extend_from_slice(r.source_uri.as_bytes());
    buf.push(0);
    buf.extend_from_slice(r.member_path.as_bytes());
    buf.push(0);
    buf.extend_from_slice(r.offset.to_string().as_bytes());
    buf.push(0);
    buf.extend_from_slice(r.length.to_string().as_bytes());
    sha256_hex(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sref(offset: u64) -> SampleRef {
        SampleRef {
            source_uri: "file:///d/a.tar".into(),
            member_path: "x.jpg".into(),
            offset,
            length: 100,
        }
    }

    #[test]
    fn uid_is_stable_and_offset_sensitive() {
        assert_eq!(uid(&sref(512)), uid(&sref(512)));
        assert_ne!(uid(&sref(512)), uid(&sref(1024)));
    }

    #[test]
    fn uid_matches_external_digest() {
        // hashlib.sha256(b"file:///d/a.tar\0x.jpg\0512\0100")
        assert_eq!(
            uid(&sref(512)),
            "5c1b4727714d279fc9daa4f867cf552566a1c222fbc2179482ed440012230380"
        );
    }

    #[test]
    fn column_type_parsing() {
        assert_eq!("fvec:64".parse::<ColumnType>().unwrap(), ColumnType::FVec(64));
        assert_eq!("fvec(3)".parse::<ColumnType>().unwrap(), ColumnType::FVec(3));
        assert_eq!("int64".parse::<ColumnType>().unwrap(), ColumnType::Int64);
        assert!("fvec:0".parse::<ColumnType>().is_err());
        assert!("vec".parse::<ColumnType>().is_err());
        assert!(ColumnType::from_tag(5, 0).is_err());
        assert!(ColumnType::from_tag(0, 3).is_err());
    }

    #[test]
    fn schema_validation() {
        let s = Schema::with_attributes(vec![Field::new("size", ColumnType::Int64, true)]).unwrap();
        assert_eq!(s.index_of("size"), Some(5));
        assert_eq!(s.attributes().len(), 1);
        assert!(Schema::with_attributes(vec![Field::new("9x", ColumnType::Int64, true)]).is_err());
        assert!(Schema::with_attributes(vec![Field::new("a", ColumnType::Int64, true), Field::new("a", ColumnType::Bool, true)]).is_err());
        assert!(matches!(
            s.with_field(Field::new("size", ColumnType::Bool, true)),
            Err(Error::ColumnExists(_))
        ));
        assert!(Schema::from_fields(vec![Field::new("a", ColumnType::Int64, true)]).is_err());
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<Schema>(&json).unwrap(), s);
    }
}
