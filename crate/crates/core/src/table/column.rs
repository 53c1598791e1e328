//! Typed nullable columns and the `DFC1` column file codec.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DFC1" | version u16 | type tag u8 | flags u8 (bit0 nullable) | dim u32 | row_count u64
//! validity bitmap, ceil(rows/8) bytes, LSB-first (only when nullable)
//! payload:
//!   int64/float64  8 bytes per row
//!   bool           1 byte per row (0/1)
//!   utf8/bytes     (rows+1) u64 offsets, then the concatenated blob
//!   fvec           rows*dim binary32
//! ```
//!
//! Null rows hold zeroed fixed slots and zero blob bytes.

use std::sync::Arc;

use super::{ColumnType, Value};
use crate::error::{Error, Result};

pub const COLUMN_MAGIC: &[u8; 4] = b"DFC1";
const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 20;

/// Validity bits, LSB-first within each byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    bytes: Vec<u8>,
    len: usize,
}

impl Bitmap {
    pub fn all_valid(len: usize) -> Self {
        let mut bytes = vec![0xffu8; len.div_ceil(8)];
        if len % 8 != 0 {
            if let Some(last) = bytes.last_mut() {
                *last = (1u8 << (len % 8)) - 1;
            }
        }
        Bitmap { bytes, len }
    }

    pub fn from_bools(valid: impl IntoIterator<Item = bool>) -> Self {
        let mut bytes = Vec::new();
        let mut len = 0;
        for v in valid {
            if len % 8 == 0 {
                bytes.push(0);
            }
            if v {
                *bytes.last_mut().expect("pushed") |= 1 << (len % 8);
            }
            len += 1;
        }
        Bitmap { bytes, len }
    }

    pub fn get(&self, i: usize) -> bool {
        self.bytes[i / 8] & (1 << (i % 8)) != 0
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn null_count(&self) -> usize {
        (0..self.len).filter(|&i| !self.get(i)).count()
    }
}

#[derive(Debug, Clone)]
pub enum ColumnData {
    Int64(Vec<i64>),
    Float64(Vec<f64>),
    Bool(Vec<bool>),
    Utf8(Vec<String>),
    Bytes(Vec<Vec<u8>>),
    FVec { dim: u32, values: Vec<f32> },
}

impl ColumnData {
    fn empty(ty: ColumnType, capacity: usize) -> Self {
        match ty {
            ColumnType::Int64 => ColumnData::Int64(Vec::with_capacity(capacity)),
            ColumnType::Float64 => ColumnData::Float64(Vec::with_capacity(capacity)),
            ColumnType::Bool => ColumnData::Bool(Vec::with_capacity(capacity)),
            ColumnType::Utf8 => ColumnData::Utf8(Vec::with_capacity(capacity)),
            ColumnType::Bytes => ColumnData::Bytes(Vec::with_capacity(capacity)),
            ColumnType::FVec(dim) => ColumnData::FVec {
                dim,
                values: Vec::with_capacity(capacity * dim as usize),
            },
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn len(&self) -> usize {
        match self {
            ColumnData::Int64(v) => v.len(),
            ColumnData::Float64(v) => v.len(),
            ColumnData::Bool(v) => v.len(),
            ColumnData::Utf8(v) => v.len(),
            ColumnData::Bytes(v) => v.len(),
            ColumnData::FVec { dim, values } => values.len() / *dim as usize,
        }
    }

    fn column_type(&self) -> ColumnType {
        match self {
            ColumnData::Int64(_) => ColumnType::Int64,
            ColumnData::Float64(_) => ColumnType::Float64,
            ColumnData::Bool(_) => ColumnType::Bool,
            ColumnData::Utf8(_) => ColumnType::Utf8,
            ColumnData::Bytes(_) => ColumnType::Bytes,
            ColumnData::FVec { dim, .. } => ColumnType::FVec(*dim),
        }
    }

    /// Appends a value, or the type's zero slot for null.
    fn push(&mut self, v: &Value) -> std::result::Result<(), ColumnType> {
        match (self, v) {
            (ColumnData::Int64(c), Value::Int(i)) => c.push(*i),
            (ColumnData::Int64(c), Value::Null) => c.push(0),
            (ColumnData::Float64(c), Value::Float(f)) => c.push(*f),
            (ColumnData::Float64(c), Value::Int(i)) => c.push(*i as f64),
            (ColumnData::Float64(c), Value::Null) => c.push(0.0),
            (ColumnData::Bool(c), Value::Bool(b)) => c.push(*b),
            (ColumnData::Bool(c), Value::Null) => c.push(false),
            (ColumnData::Utf8(c), Value::Text(s)) => c.push(s.clone()),
            (ColumnData::Utf8(c), Value::Null) => c.push(String::new()),
            (ColumnData::Bytes(c), Value::Bytes(b)) => c.push(b.clone()),
            (ColumnData::Bytes(c), Value::Null) => c.push(Vec::new()),
            (ColumnData::FVec { dim, values }, Value::FVec(v)) if v.len() == *dim as usize => {
                values.extend_from_slice(v)
            }
            (ColumnData::FVec { dim, values }, Value::Null) => {
                values.extend(std::iter::repeat_n(0.0f32, *dim as usize))
            }
            (data, _) => return Err(data.column_type()),
        }
        Ok(())
    }
}

/// Immutable typed column. Cheap to clone.
#[derive(Debug, Clone)]
pub struct ColumnVector {
    inner: Arc<Inner>,
}

#[derive(Debug)]
struct Inner {
    data: ColumnData,
    validity: Bitmap,
    nullable: bool,
}

impl PartialEq for ColumnVector {
    fn eq(&self, other: &Self) -> bool {
        self.column_type() == other.column_type()
            && self.nullable() == other.nullable()
            && self.len() == other.len()
            && (0..self.len()).all(|i| self.value(i) == other.value(i))
    }
}

impl ColumnVector {
    pub fn from_values(ty: ColumnType, nullable: bool, values: &[Value]) -> Result<Self> {
        let mut data = ColumnData::empty(ty, values.len());
        for (i, v) in values.iter().enumerate() {
            if v.is_null() && !nullable {
                return Err(Error::InvariantViolation(format!(
                    "null at row {i} of non-nullable {ty} column"
                )));
            }
            data.push(v).map_err(|expected| {
                Error::InvariantViolation(format!(
                    "row {i}: value {v} does not fit column type {expected}"
                ))
            })?;
        }
        let validity = Bitmap::from_bools(values.iter().map(|v| !v.is_null()));
        Ok(Self::from_parts(data, validity, nullable))
    }

    fn from_parts(data: ColumnData, validity: Bitmap, nullable: bool) -> Self {
        ColumnVector {
            inner: Arc::new(Inner {
                data,
                validity,
                nullable,
            }),
        }
    }

    pub fn column_type(&self) -> ColumnType {
        self.inner.data.column_type()
    }

    pub fn nullable(&self) -> bool {
        self.inner.nullable
    }

    pub fn len(&self) -> usize {
        self.inner.validity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &ColumnData {
        &self.inner.data
    }

    pub fn validity(&self) -> &Bitmap {
        &self.inner.validity
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.inner.validity.get(i)
    }

    pub fn value(&self, i: usize) -> Value {
        if !self.is_valid(i) {
            return Value::Null;
        }
        match &self.inner.data {
            ColumnData::Int64(v) => Value::Int(v[i]),
            ColumnData::Float64(v) => Value::Float(v[i]),
            ColumnData::Bool(v) => Value::Bool(v[i]),
            ColumnData::Utf8(v) => Value::Text(v[i].clone()),
            ColumnData::Bytes(v) => Value::Bytes(v[i].clone()),
            ColumnData::FVec { dim, values } => {
                let d = *dim as usize;
                Value::FVec(values[i * d..(i + 1) * d].to_vec())
            }
        }
    }

    pub fn values(&self) -> Vec<Value> {
        (0..self.len()).map(|i| self.value(i)).collect()
    }

    /// Text cell without cloning; `None` for null or non-text columns.
    pub fn str_at(&self, i: usize) -> Option<&str> {
        match &self.inner.data {
            ColumnData::Utf8(v) if self.is_valid(i) => Some(&v[i]),
            _ => None,
        }
    }

    pub fn i64_at(&self, i: usize) -> Option<i64> {
        match &self.inner.data {
            ColumnData::Int64(v) if self.is_valid(i) => Some(v[i]),
            _ => None,
        }
    }

    /// Rows at `indices`, in that order.
    pub fn take(&self, indices: &[usize]) -> ColumnVector {
        let values: Vec<Value> = indices.iter().map(|&i| self.value(i)).collect();
        ColumnVector::from_values(self.column_type(), self.nullable(), &values)
            .expect("rows of a valid column")
    }

    pub fn concat(parts: &[&ColumnVector]) -> Result<ColumnVector> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvariantViolation("concat of no columns".into()))?;
        let mut values = Vec::new();
        for p in parts {
            if p.column_type() != first.column_type() {
                return Err(Error::InvariantViolation(format!(
                    "concat of {} and {}",
                    first.column_type(),
                    p.column_type()
                )));
            }
            values.extend(p.values());
        }
        let nullable = parts.iter().any(|p| p.nullable());
        ColumnVector::from_values(first.column_type(), nullable, &values)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_column(col: &ColumnVector) -> Vec<u8> {
    let ty = col.column_type();
    let rows = col.len();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * 8);
    out.extend_from_slice(COLUMN_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(ty.tag());
    out.push(col.nullable() as u8);
    out.extend_from_slice(&ty.dim().to_le_bytes());
    put_u64(&mut out, rows as u64);
    if col.nullable() {
        out.extend_from_slice(col.validity().as_bytes());
    }
    match col.data() {
        ColumnData::Int64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        ColumnData::Float64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        ColumnData::Bool(v) => out.extend(v.iter().map(|&b| b as u8)),
        ColumnData::Utf8(v) => encode_blobs(&mut out, v.iter().map(|s| s.as_bytes())),
        ColumnData::Bytes(v) => encode_blobs(&mut out, v.iter().map(|b| b.as_slice())),
        ColumnData::FVec { values, .. } => {
            values.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()))
        }
    }
    out
}

fn encode_blobs<'a>(out: &mut Vec<u8>, items: impl Iterator<Item = &'a [u8]> + Clone) {
    let mut offset = 0u64;
    put_u64(out, 0);
    for item in items.clone() {
        offset += item.len() as u64;
        put_u64(out, offset);
    }
    for item in items {
        out.extend_from_slice(item);
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::Truncated(format!("{what} at byte {}", self.pos)))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn checked_size(rows: u64, width: u64) -> Result<usize> {
    rows.checked_mul(width)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::InvariantViolation(format!("{rows} rows overflow")))
}

pub fn decode_column(bytes: &[u8]) -> Result<ColumnVector> {
    let mut r = Reader { data: bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != COLUMN_MAGIC {
        return Err(Error::ColumnBadMagic);
    }
    r.take(4, "magic")?;
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::ColumnBadVersion(version));
    }
    let tag = r.take(1, "type tag")?[0];
    let flags = r.take(1, "flags")?[0];
    if flags & !1 != 0 {
        return Err(Error::InvariantViolation(format!("unknown flags {flags:#x}")));
    }
    let nullable = flags & 1 == 1;
    let dim = u32::from_le_bytes(r.take(4, "dim")?.try_into().expect("4 bytes"));
    let ty = ColumnType::from_tag(tag, dim)?;
    let rows64 = r.u64("row count")?;
    let rows = checked_size(rows64, 1)?;
    let validity = if nullable {
        let raw = r.take(rows.div_ceil(8), "validity")?;
        if rows % 8 != 0 && raw[raw.len() - 1] >> (rows % 8) != 0 {
            return Err(Error::InvariantViolation("validity padding bits set".into()));
        }
        Bitmap {
            bytes: raw.to_vec(),
            len: rows,
        }
    } else {
        Bitmap::all_valid(rows)
    };
    let zero_null = |i: usize, is_zero: bool| -> Result<()> {
        if !validity.get(i) && !is_zero {
            return Err(Error::InvariantViolation(format!("null row {i} has a non-zero slot")));
        }
        Ok(())
    };
    let data = match ty {
        ColumnType::Int64 | ColumnType::Float64 => {
            let raw = r.take(checked_size(rows64, 8)?, "fixed payload")?;
            let words = raw.chunks_exact(8).map(|c| c.try_into().expect("8 bytes"));
            if ty == ColumnType::Int64 {
                let v: Vec<i64> = words.map(i64::from_le_bytes).collect();
                for (i, x) in v.iter().enumerate() {
                    zero_null(i, *x == 0)?;
                }
                ColumnData::Int64(v)
            } else {
                let v: Vec<f64> = words.map(f64::from_le_bytes).collect();
                for (i, x) in v.iter().enumerate() {
                    zero_null(i, x.to_bits() == 0)?;
                }
                ColumnData::Float64(v)
            }
        }
        ColumnType::Bool => {
            let raw = r.take(rows, "bool payload")?;
            let mut v = Vec::with_capacity(rows);
            for (i, &b) in raw.iter().enumerate() {
                if b > 1 {
                    return Err(Error::InvariantViolation(format!("bool byte {b} at row {i}")));
                }
                zero_null(i, b == 0)?;
                v.push(b == 1);
            }
            ColumnData::Bool(v)
        }
        ColumnType::Utf8 | ColumnType::Bytes => {
            let mut offsets = Vec::with_capacity(rows + 1);
            for _ in 0..=rows {
                offsets.push(r.u64("offsets")?);
            }
            if offsets[0] != 0 || offsets.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::InvariantViolation("non-monotonic offsets".into()));
            }
            let blob = r.take(checked_size(offsets[rows], 1)?, "blob")?;
            let mut items = Vec::with_capacity(rows);
            for i in 0..rows {
                zero_null(i, offsets[i] == offsets[i + 1])?;
                items.push(&blob[offsets[i] as usize..offsets[i + 1] as usize]);
            }
            if ty == ColumnType::Utf8 {
                ColumnData::Utf8(
                    items
                        .into_iter()
                        .map(|b| {
                            std::str::from_utf8(b)
                                .map(str::to_string)
                                .map_err(|_| Error::InvariantViolation("invalid UTF-8".into()))
                        })
                        .collect::<Result<_>>()?,
                )
            } else {
                ColumnData::Bytes(items.into_iter().map(<[u8]>::to_vec).collect())
            }
        }
        ColumnType::FVec(dim) => {
            let raw = r.take(checked_size(rows64, 4 * dim as u64)?, "vector payload")?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            for i in 0..rows {
                let row = &values[i * dim as usize..(i + 1) * dim as usize];
                zero_null(i, row.iter().all(|x| x.to_bits() == 0))?;
            }
            ColumnData::FVec { dim, values }
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::InvariantViolation(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(ColumnVector::from_parts(data, validity, nullable))
}
