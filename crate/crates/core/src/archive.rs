//! Tar member indexing over ranged reads.
//!
//! [`index_tar`] walks ustar / pre-POSIX headers through [`Storage`] and
//! records where each regular file's payload lives, so a sample can later be
//! fetched with a single range request instead of extracting the archive.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::storage::{ByteRange, SourceUri, Storage};

pub const BLOCK: u64 = 512;

/// Default read-ahead window used while walking headers.
pub const DEFAULT_HEADER_WINDOW: u64 = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TarMember {
    pub member_path: String,
    pub data_offset: u64,
    pub data_length: u64,
    pub typeflag: u8,
}

impl TarMember {
    pub fn range(&self) -> Option<ByteRange> {
        ByteRange::new(self.data_offset, self.data_length).ok()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IndexOptions {
    /// Bytes requested per header read. At least one block; larger windows
    /// pick up several small members' headers in one GET.
    pub header_window: u64,
}

impl Default for IndexOptions {
    fn default() -> Self {
        IndexOptions {
            header_window: DEFAULT_HEADER_WINDOW,
        }
    }
}

/// Buffered view over an object that only issues ranged reads.
struct RangeCursor<'a> {
    storage: &'a Storage,
    uri: &'a SourceUri,
    size: u64,
    window: u64,
    buf_start: u64,
    buf: Vec<u8>,
}

impl<'a> RangeCursor<'a> {
    fn bytes(&mut self, offset: u64, len: u64) -> Result<&[u8]> {
        if offset + len > self.size {
            return Err(Error::TruncatedArchive {
                uri: self.uri.to_string(),
                offset,
            });
        }
        let buf_end = self.buf_start + self.buf.len() as u64;
        if offset < self.buf_start || offset + len > buf_end {
            let want = len.max(self.window).min(self.size - offset);
            self.buf = self.storage.read_range(self.uri, ByteRange::new(offset, want)?)?;
            self.buf_start = offset;
        }
        let start = (offset - self.buf_start) as usize;
        Ok(&self.buf[start..start + len as usize])
    }
}

fn field_str(bytes: &[u8]) -> String {
    let end = bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len());
    String::from_utf8_lossy(&bytes[..end]).into_owned()
}

/// Octal numeric field, NUL/space terminated, with optional leading spaces.
fn parse_octal(bytes: &[u8]) -> Option<u64> {
    let digits: Vec<u8> = bytes
        .iter()
        .copied()
        .skip_while(|&b| b == b' ')
        .take_while(|&b| b != 0 && b != b' ')
        .collect();
    if digits.is_empty() {
        return Some(0);
    }
    let mut v: u64 = 0;
    for d in digits {
        if !(b'0'..=b'7').contains(&d) {
            return None;
        }
        v = v.checked_mul(8)?.checked_add((d - b'0') as u64)?;
    }
    Some(v)
}

/// Size field: octal, or GNU base-256 when the high bit of the first byte is set.
fn parse_size(bytes: &[u8]) -> Option<u64> {
    if bytes[0] & 0x80 != 0 {
        if bytes[0] & 0x40 != 0 {
            return None; // negative
        }
        let mut v: u64 = (bytes[0] & 0x3f) as u64;
        for &b in &bytes[1..] {
            v = v.checked_mul(256)?.checked_add(b as u64)?;
        }
        Some(v)
    } else {
        parse_octal(bytes)
    }
}

/// Sum of header bytes with the checksum field read as spaces.
pub fn header_checksum(header: &[u8]) -> (u64, i64) {
    let mut unsigned = 0u64;
    let mut signed = 0i64;
    for (i, &b) in header[..BLOCK as usize].iter().enumerate() {
        let b = if (148..156).contains(&i) { b' ' } else { b };
        unsigned += b as u64;
        signed += b as i8 as i64;
    }
    (unsigned, signed)
}

fn padded(len: u64) -> u64 {
    len.div_ceil(BLOCK) * BLOCK
}

fn pax_path(records: &[u8]) -> Option<String> {
    let mut rest = records;
    let mut path = None;
    while !rest.is_empty() {
        let space = rest.iter().position(|&b| b == b' ')?;
        let len: usize = std::str::from_utf8(&rest[..space]).ok()?.parse().ok()?;
        if len <= space || len > rest.len() {
            return None;
        }
        let record = &rest[space + 1..len];
        let record = record.strip_suffix(b"\n").unwrap_or(record);
        if let Some(eq) = record.iter().position(|&b| b == b'=') {
            if &record[..eq] == b"path" {
                path = Some(String::from_utf8_lossy(&record[eq + 1..]).into_owned());
            }
        }
        rest = &rest[len..];
    }
    path
}

fn compressed_kind(head: &[u8]) -> Option<&'static str> {
    if head.starts_with(&[0x1f, 0x8b]) {
        Some("gzip")
    } else if head.starts_with(b"BZh") {
        Some("bzip2")
    } else if head.starts_with(&[0xfd, b'7', b'z', b'X', b'Z', 0x00]) {
        Some("xz")
    } else if head.starts_with(&[0x28, 0xb5, 0x2f, 0xfd]) {
        Some("zstd")
    } else {
        None
    }
}

/// Indexes every regular-file member of a tar object, in archive order.
pub fn index_tar(storage: &Storage, uri: &SourceUri) -> Result<Vec<TarMember>> {
    index_tar_with(storage, uri, IndexOptions::default())
}

pub fn index_tar_with(
    storage: &Storage,
    uri: &SourceUri,
    options: IndexOptions,
) -> Result<Vec<TarMember>> {
    let size = storage.stat(uri)?;
    let mut cursor = RangeCursor {
        storage,
        uri,
        size,
        window: options.header_window.max(BLOCK),
        buf_start: 0,
        buf: Vec::new(),
    };
    let mut members = Vec::new();
    let mut seen = HashSet::new();
    let mut pending_name: Option<String> = None;
    if size > 0 {
        let head = cursor.bytes(0, size.min(BLOCK))?;
        if let Some(kind) = compressed_kind(head) {
            return Err(Error::CompressedArchive {
                uri: uri.to_string(),
                kind,
            });
        }
    }
    let mut offset = 0u64;
    while offset < size {
        let header = cursor.bytes(offset, BLOCK)?.to_vec();
        if header.iter().all(|&b| b == 0) {
            let next = offset + BLOCK;
            if next >= size || cursor.bytes(next, BLOCK)?.iter().all(|&b| b == 0) {
                break;
            }
            offset = next;
            continue;
        }
        let magic = &header[257..263];
        let posix = magic == b"ustar\0";
        let gnu = magic == b"ustar ";
        if !(posix || gnu || magic.iter().all(|&b| b == 0)) {
            return Err(Error::BadMagic {
                uri: uri.to_string(),
                offset,
            });
        }
        let stored = parse_octal(&header[148..156]).ok_or(Error::BadMagic {
            uri: uri.to_string(),
            offset,
        })?;
        let (unsigned, signed) = header_checksum(&header);
        if stored != unsigned && stored as i64 != signed {
            return Err(Error::BadChecksum {
                uri: uri.to_string(),
                offset,
                stored,
                computed: unsigned,
            });
        }
        let data_length = parse_size(&header[124..136]).ok_or(Error::BadMagic {
            uri: uri.to_string(),
            offset,
        })?;
        let data_offset = offset + BLOCK;
        let next = data_offset
            .checked_add(padded(data_length))
            .ok_or(Error::TruncatedArchive {
                uri: uri.to_string(),
                offset,
            })?;
        if data_offset + data_length > size {
            return Err(Error::TruncatedArchive {
                uri: uri.to_string(),
                offset,
            });
        }
        let flag = header[156];
        match flag {
            b'0' | 0 => {
                let mut name = field_str(&header[0..100]);
                if posix {
                    let prefix = field_str(&header[345..500]);
                    if !prefix.is_empty() {
                        name = format!("{prefix}/{name}");
                    }
                }
                let member_path = pending_name.take().unwrap_or(name);
                if member_path.is_empty() {
                    return Err(Error::UnsupportedHeader {
                        uri: uri.to_string(),
                        flag: flag as char,
                        offset,
                    });
                }
                if !seen.insert(member_path.clone()) {
                    return Err(Error::DuplicateMember {
                        uri: uri.to_string(),
                        path: member_path,
                    });
                }
                members.push(TarMember {
                    member_path,
                    data_offset,
                    data_length,
                    typeflag: flag,
                });
            }
            b'5' => {
                pending_name = None;
            }
            b'L' => {
                let data = cursor.bytes(data_offset, data_length)?;
                pending_name = Some(field_str(data));
            }
            b'x' => {
                let data = cursor.bytes(data_offset, data_length)?.to_vec();
                if let Some(path) = pax_path(&data) {
                    pending_name = Some(path);
                }
            }
            other => {
                return Err(Error::UnsupportedHeader {
                    uri: uri.to_string(),
                    flag: other as char,
                    offset,
                })
            }
        }
        offset = next;
    }
    Ok(members)
}

/// Fetches a member's payload with one ranged read.
pub fn verify_member(storage: &Storage, uri: &SourceUri, member: &TarMember) -> Result<Vec<u8>> {
    match member.range() {
        Some(range) => storage.read_range(uri, range),
        None => Ok(Vec::new()),
    }
}
