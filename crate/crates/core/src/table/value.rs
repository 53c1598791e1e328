use std::fmt;

use base64::Engine as _;
use serde_json::Value as Json;

use super::ColumnType;
use crate::error::{Error, Result};

/// A single cell.
#[derive(Debug, Clone)]
pub enum Value {
    Null,
    Int(i64),
    Float(f64),
    Bool(bool),
    Text(String),
    Bytes(Vec<u8>),
    FVec(Vec<f32>),
}

/// Bit-exact equality: floats compare by representation so NaN == NaN.
impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Null, Value::Null) => true,
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Float(a), Value::Float(b)) => a.to_bits() == b.to_bits(),
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Text(a), Value::Text(b)) => a == b,
            (Value::Bytes(a), Value::Bytes(b)) => a == b,
            (Value::FVec(a), Value::FVec(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn column_type(&self) -> Option<ColumnType> {
        Some(match self {
            Value::Null => return None,
            Value::Int(_) => ColumnType::Int64,
            Value::Float(_) => ColumnType::Float64,
            Value::Bool(_) => ColumnType::Bool,
            Value::Text(_) => ColumnType::Utf8,
            Value::Bytes(_) => ColumnType::Bytes,
            Value::FVec(v) => ColumnType::FVec(v.len() as u32),
        })
    }

    /// JSON form used on the UDF wire and in exports. Bytes are base64;
    /// non-finite floats become null.
    pub fn to_json(&self) -> Json {
        match self {
            Value::Null => Json::Null,
            Value::Int(i) => Json::from(*i),
            Value::Float(f) => serde_json::Number::from_f64(*f)
                .map(Json::Number)
                .unwrap_or(Json::Null),
            Value::Bool(b) => Json::Bool(*b),
            Value::Text(s) => Json::String(s.clone()),
            Value::Bytes(b) => Json::String(base64::engine::general_purpose::STANDARD.encode(b)),
            Value::FVec(v) => Json::Array(
                v.iter()
                    .map(|x| {
                        serde_json::Number::from_f64(*x as f64)
                            .map(Json::Number)
                            .unwrap_or(Json::Null)
                    })
                    .collect(),
            ),
        }
    }

    /// Interprets JSON as a value of the expected column type.
    pub fn from_json_typed(json: &Json, ty: ColumnType) -> Result<Value> {
        let bad = || {
            Error::InvariantViolation(format!("value {json} does not fit column type {ty}"))
        };
        if json.is_null() {
            return Ok(Value::Null);
        }
        Ok(match ty {
            ColumnType::Int64 => Value::Int(json.as_i64().ok_or_else(bad)?),
            ColumnType::Float64 => Value::Float(json.as_f64().ok_or_else(bad)?),
            ColumnType::Bool => Value::Bool(json.as_bool().ok_or_else(bad)?),
            ColumnType::Utf8 => Value::Text(json.as_str().ok_or_else(bad)?.to_string()),
            ColumnType::Bytes => Value::Bytes(
                base64::engine::general_purpose::STANDARD
                    .decode(json.as_str().ok_or_else(bad)?)
                    .map_err(|_| bad())?,
            ),
            ColumnType::FVec(dim) => {
                let items = json.as_array().ok_or_else(bad)?;
                if items.len() != dim as usize {
                    return Err(bad());
                }
                Value::FVec(
                    items
                        .iter()
                        .map(|x| x.as_f64().map(|f| f as f32).ok_or_else(bad))
                        .collect::<Result<_>>()?,
                )
            }
        })
    }

    /// Stable textual form used inside operation descriptors:
    /// `<type>:<canonical json>`.
    pub fn canonical_text(&self) -> String {
        let ty = match self.column_type() {
            Some(t) => t.name(),
            None => "null",
        };
        format!("{ty}:{}", crate::canonical::canonical_value(&self.to_json()))
    }

    /// Inverse of [`Value::canonical_text`].
    pub fn from_canonical_text(text: &str) -> Result<Value> {
        let (ty, body) = text
            .split_once(':')
            .ok_or_else(|| Error::InvariantViolation(format!("bad canonical value {text:?}")))?;
        if ty == "null" {
            return Ok(Value::Null);
        }
        let json: Json = serde_json::from_str(body)
            .map_err(|e| Error::InvariantViolation(format!("bad canonical value {text:?}: {e}")))?;
        let ty = if ty == "fvec" {
            ColumnType::FVec(json.as_array().map(|a| a.len() as u32).unwrap_or(0))
        } else {
            ty.parse()?
        };
        Value::from_json_typed(&json, ty)
    }

    /// Parses a parameter given on a command line or in a pipeline file.
    /// Integers, floats, `true`/`false` and JSON number arrays get their
    /// natural types; anything else is text.
    pub fn parse_param(text: &str) -> Value {
        let t = text.trim();
        if let Ok(i) = t.parse::<i64>() {
            return Value::Int(i);
        }
        if t.contains(['.', 'e', 'E']) && !t.chars().any(|c| c.is_ascii_alphabetic() && c != 'e' && c != 'E') {
            if let Ok(f) = t.parse::<f64>() {
                return Value::Float(f);
            }
        }
        match t {
            "true" => return Value::Bool(true),
            "false" => return Value::Bool(false),
            _ => {}
        }
        if t.starts_with('[') {
            if let Ok(json) = serde_json::from_str::<Json>(t) {
                if let Ok(v) = Value::from_json_param(&json) {
                    return v;
                }
            }
        }
        Value::Text(text.to_string())
    }

    /// Parses a parameter from a JSON document (e.g. a vector file).
    pub fn from_json_param(json: &Json) -> Result<Value> {
        let bad = |why: &str| Error::BadParam {
            name: String::new(),
            reason: format!("{why}: {json}"),
        };
        Ok(match json {
            Json::Null => return Err(bad("null parameter")),
            Json::Bool(b) => Value::Bool(*b),
            Json::Number(n) => match n.as_i64() {
                Some(i) => Value::Int(i),
                None => Value::Float(n.as_f64().ok_or_else(|| bad("number out of range"))?),
            },
            Json::String(s) => Value::Text(s.clone()),
            Json::Array(items) => {
                if items.is_empty() {
                    return Err(bad("empty vector"));
                }
                Value::FVec(
                    items
                        .iter()
                        .map(|x| x.as_f64().map(|f| f as f32).ok_or_else(|| bad("non-numeric vector")))
                        .collect::<Result<_>>()?,
                )
            }
            Json::Object(m) => match m.get("vector").or_else(|| m.get("values")) {
                Some(inner) => Value::from_json_param(inner)?,
                None => return Err(bad("object parameter without \"vector\"")),
            },
        })
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("null"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Text(s) => write!(f, "{s:?}"),
            Value::Bytes(b) => write!(f, "<{} bytes>", b.len()),
            Value::FVec(v) => {
                f.write_str("[")?;
                for (i, x) in v.iter().take(4).enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{x}")?;
                }
                if v.len() > 4 {
                    f.write_str(", …")?;
                }
                write!(f, "] (dim {})", v.len())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trip() {
        for v in [
            Value::Int(1000),
            Value::Float(1.0),
            Value::Float(0.1),
            Value::Bool(false),
            Value::Text("a:b".into()),
            Value::Bytes(vec![0, 1, 255]),
            Value::FVec(vec![0.1, -2.5, 3.0]),
        ] {
            let t = v.canonical_text();
            assert_eq!(Value::from_canonical_text(&t).unwrap(), v, "{t}");
        }
        assert_ne!(Value::Int(1).canonical_text(), Value::Float(1.0).canonical_text());
    }

    #[test]
    fn param_parsing() {
        assert_eq!(Value::parse_param("1000"), Value::Int(1000));
        assert_eq!(Value::parse_param("0.5"), Value::Float(0.5));
        assert_eq!(Value::parse_param("1e3"), Value::Float(1000.0));
        assert_eq!(Value::parse_param("true"), Value::Bool(true));
        assert_eq!(Value::parse_param("[1, 0]"), Value::FVec(vec![1.0, 0.0]));
        assert_eq!(Value::parse_param("cat"), Value::Text("cat".into()));
        assert_eq!(Value::parse_param("inf"), Value::Text("inf".into()));
    }

    #[test]
    fn f32_vectors_survive_json() {
        let v = Value::FVec(vec![0.1, 1.0 / 3.0, 7.0e-8, 123456.79]);
        let text = serde_json::to_string(&v.to_json()).unwrap();
        let back = Value::from_json_param(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, v);
    }
}
