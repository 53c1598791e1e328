//! Byte-range access to sample sources.
//!
//! Every read goes through [`Storage`], which counts requests and bytes so
//! callers can reason about GET economy regardless of backend. Local files
//! are accounted exactly like HTTP objects.

use std::fmt;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crate::error::{Error, Result};

/// Default merge gap for coalesced reads.
pub const DEFAULT_COALESCE_GAP: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    File,
    Http,
    Https,
}

/// An absolute `file://`, `http://` or `https://` location.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SourceUri {
    scheme: Scheme,
    text: String,
}

impl SourceUri {
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |reason: &str| Error::BadUri {
            uri: text.to_string(),
            reason: reason.to_string(),
        };
        let (scheme, rest) = text
            .split_once("://")
            .ok_or_else(|| Error::SchemeUnsupported(text.to_string()))?;
        let scheme = match scheme.to_ascii_lowercase().as_str() {
            "file" => Scheme::File,
            "http" => Scheme::Http,
            "https" => Scheme::Https,
            _ => return Err(Error::SchemeUnsupported(text.to_string())),
        };
        match scheme {
            Scheme::File => {
                if !rest.starts_with('/') {
                    return Err(bad("file URI must carry an absolute path"));
                }
                if rest.contains('?') || rest.contains('#') {
                    return Err(bad("file URI may not contain a query or fragment"));
                }
            }
            Scheme::Http | Scheme::Https => {
                let authority = rest.split('/').next().unwrap_or("");
                if authority.is_empty() {
                    return Err(bad("missing host"));
                }
            }
        }
        Ok(SourceUri {
            scheme,
            text: text.to_string(),
        })
    }

    /// Builds a `file://` URI from an absolute or relative local path.
    pub fn from_path(path: &Path) -> Result<Self> {
        let abs = if path.is_absolute() {
            path.to_path_buf()
        } else {
            std::env::current_dir()
                .map_err(|e| Error::io("current directory", e))?
                .join(path)
        };
        Self::parse(&format!("file://{}", abs.display()))
    }

    /// Accepts either a URI or a local path.
    pub fn from_arg(text: &str) -> Result<Self> {
        if text.contains("://") {
            Self::parse(text)
        } else {
            Self::from_path(Path::new(text))
        }
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    /// Local filesystem path for `file://` URIs.
    pub fn local_path(&self) -> Option<PathBuf> {
        match self.scheme {
            Scheme::File => Some(PathBuf::from(&self.text["file://".len()..])),
            _ => None,
        }
    }

    /// Final path component, used as a display name for standalone files.
    pub fn file_name(&self) -> &str {
        self.text.rsplit('/').next().unwrap_or(&self.text)
    }
}

impl fmt::Display for SourceUri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl FromStr for SourceUri {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ByteRange {
    offset: u64,
    length: u64,
}

impl ByteRange {
    pub fn new(offset: u64, length: u64) -> Result<Self> {
        if length == 0 {
            return Err(Error::BadRange(format!("zero-length range at {offset}")));
        }
        if offset.checked_add(length).is_none() {
            return Err(Error::BadRange(format!("{offset}+{length} overflows")));
        }
        Ok(ByteRange { offset, length })
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn length(&self) -> u64 {
        self.length
    }

    pub fn end(&self) -> u64 {
        self.offset + self.length
    }

    /// `Range` header value; the end is inclusive.
    pub fn http_header(&self) -> String {
        format!("bytes={}-{}", self.offset, self.end() - 1)
    }
}

/// Snapshot of request accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RequestStats {
    pub get_count: u64,
    pub bytes_fetched: u64,
}

impl RequestStats {
    pub fn since(&self, earlier: &RequestStats) -> RequestStats {
        RequestStats {
            get_count: self.get_count - earlier.get_count,
            bytes_fetched: self.bytes_fetched - earlier.bytes_fetched,
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    get_count: AtomicU64,
    bytes_fetched: AtomicU64,
}

#[derive(Debug, Clone)]
pub struct StorageConfig {
    /// Merge gap for coalesced reads; `None` disables coalescing.
    pub coalesce_gap: Option<u64>,
    pub http_attempts: u32,
    pub http_backoff: Duration,
    pub http_timeout: Duration,
}

impl Default for StorageConfig {
    fn default() -> Self {
        StorageConfig {
            coalesce_gap: Some(DEFAULT_COALESCE_GAP),
            http_attempts: 3,
            http_backoff: Duration::from_millis(100),
            http_timeout: Duration::from_secs(60),
        }
    }
}

/// One merged request produced by [`plan_coalesced`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoalescedGroup {
    pub range: ByteRange,
    /// Indices into the caller's range list served by this request.
    pub members: Vec<usize>,
}

/// Groups ranges so that any two whose separation is at most `gap` share a
/// request. `None` keeps every range separate.
pub fn plan_coalesced(ranges: &[ByteRange], gap: Option<u64>) -> Vec<CoalescedGroup> {
    let mut order: Vec<usize> = (0..ranges.len()).collect();
    order.sort_by_key(|&i| (ranges[i].offset, ranges[i].length, i));
    let Some(gap) = gap else {
        return order
            .into_iter()
            .map(|i| CoalescedGroup {
                range: ranges[i],
                members: vec![i],
            })
            .collect();
    };
    let mut groups: Vec<CoalescedGroup> = Vec::new();
    for i in order {
        let r = ranges[i];
        if let Some(last) = groups.last_mut() {
            let end = last.range.end();
            if r.offset.saturating_sub(end) <= gap {
                let new_end = end.max(r.end());
                last.range.length = new_end - last.range.offset;
                last.members.push(i);
                continue;
            }
        }
        groups.push(CoalescedGroup {
            range: r,
            members: vec![i],
        });
    }
    groups
}

/// Accounting, thread-safe access to file and HTTP objects.
#[derive(Clone)]
pub struct Storage {
    counters: Arc<Counters>,
    config: StorageConfig,
    agent: ureq::Agent,
}

impl fmt::Debug for Storage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Storage")
            .field("stats", &self.stats())
            .field("config", &self.config)
            .finish()
    }
}

impl Default for Storage {
    fn default() -> Self {
        Self::new(StorageConfig::default())
    }
}

impl Storage {
    pub fn new(config: StorageConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.http_timeout))
            .build()
            .into();
        Storage {
            counters: Arc::new(Counters::default()),
            config,
            agent,
        }
    }

    pub fn config(&self) -> &StorageConfig {
        &self.config
    }

    pub fn stats(&self) -> RequestStats {
        RequestStats {
            get_count: self.counters.get_count.load(Ordering::SeqCst),
            bytes_fetched: self.counters.bytes_fetched.load(Ordering::SeqCst),
        }
    }

    fn account(&self, bytes: u64) {
        self.counters.get_count.fetch_add(1, Ordering::SeqCst);
        self.counters.bytes_fetched.fetch_add(bytes, Ordering::SeqCst);
    }

    /// Total object size in bytes. Not counted as a GET.
    pub fn stat(&self, uri: &SourceUri) -> Result<u64> {
        match uri.scheme() {
            Scheme::File => {
                let path = uri.local_path().expect("file scheme");
                match std::fs::metadata(&path) {
                    Ok(m) if m.is_file() => Ok(m.len()),
                    Ok(_) => Err(Error::NotFound(uri.to_string())),
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                        Err(Error::NotFound(uri.to_string()))
                    }
                    Err(e) => Err(Error::io(uri.to_string(), e)),
                }
            }
            Scheme::Http | Scheme::Https => self.http_head(uri),
        }
    }

    /// Reads exactly `range.length()` bytes at `range.offset()`.
    pub fn read_range(&self, uri: &SourceUri, range: ByteRange) -> Result<Vec<u8>> {
        match uri.scheme() {
            Scheme::File => self.file_read(uri, range),
            Scheme::Http | Scheme::Https => self.http_read(uri, range),
        }
    }

    /// Reads many ranges of one object using the configured gap.
    pub fn read_ranges(&self, uri: &SourceUri, ranges: &[ByteRange]) -> Result<Vec<Vec<u8>>> {
        self.read_ranges_coalesced(uri, ranges, self.config.coalesce_gap)
    }

    /// Reads many ranges of one object, merging nearby ranges into single
    /// requests. Payloads come back in input order.
    pub fn read_ranges_coalesced(
        &self,
        uri: &SourceUri,
        ranges: &[ByteRange],
        gap: Option<u64>,
    ) -> Result<Vec<Vec<u8>>> {
        let mut out: Vec<Vec<u8>> = vec![Vec::new(); ranges.len()];
        for group in plan_coalesced(ranges, gap) {
            let data = self.read_range(uri, group.range)?;
            for i in group.members {
                let start = (ranges[i].offset - group.range.offset) as usize;
                out[i] = data[start..start + ranges[i].length as usize].to_vec();
            }
        }
        Ok(out)
    }

    fn file_read(&self, uri: &SourceUri, range: ByteRange) -> Result<Vec<u8>> {
        let path = uri.local_path().expect("file scheme");
        let mut file = File::open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(uri.to_string())
            } else {
                Error::io(uri.to_string(), e)
            }
        })?;
        let size = file
            .metadata()
            .map_err(|e| Error::io(uri.to_string(), e))?
            .len();
        if range.end() > size {
            return Err(Error::RangeOutOfBounds {
                uri: uri.to_string(),
                offset: range.offset,
                length: range.length,
                size,
            });
        }
        self.account(range.length);
        let mut buf = vec![0u8; range.length as usize];
        file.seek(SeekFrom::Start(range.offset))
            .and_then(|_| file.read_exact(&mut buf))
            .map_err(|e| Error::io(uri.to_string(), e))?;
        Ok(buf)
    }

    fn http_head(&self, uri: &SourceUri) -> Result<u64> {
        let resp = self.with_retries(uri, || self.agent.head(uri.as_str()).call())?;
        match resp.status().as_u16() {
            200..=299 => resp
                .headers()
                .get("content-length")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .ok_or_else(|| Error::Network {
                    uri: uri.to_string(),
                    message: "HEAD response lacks Content-Length".into(),
                }),
            404 | 410 => Err(Error::NotFound(uri.to_string())),
            status => Err(Error::HttpStatus {
                uri: uri.to_string(),
                status,
            }),
        }
    }

    fn http_read(&self, uri: &SourceUri, range: ByteRange) -> Result<Vec<u8>> {
        let header = range.http_header();
        let mut resp = self.with_retries(uri, || {
            self.account(range.length);
            self.agent.get(uri.as_str()).header("Range", &header).call()
        })?;
        match resp.status().as_u16() {
            206 => {}
            200 => return Err(Error::HttpRangeUnsupported(uri.to_string())),
            404 | 410 => return Err(Error::NotFound(uri.to_string())),
            416 => {
                let size = self.http_head(uri).unwrap_or(0);
                return Err(Error::RangeOutOfBounds {
                    uri: uri.to_string(),
                    offset: range.offset,
                    length: range.length,
                    size,
                });
            }
            status => {
                return Err(Error::HttpStatus {
                    uri: uri.to_string(),
                    status,
                })
            }
        }
        let body = resp
            .body_mut()
            .with_config()
            .limit(range.length + 1)
            .read_to_vec()
            .map_err(|e| Error::Network {
                uri: uri.to_string(),
                message: e.to_string(),
            })?;
        if body.len() as u64 != range.length {
            return Err(Error::Network {
                uri: uri.to_string(),
                message: format!(
                    "expected {} bytes for {}, received {}",
                    range.length,
                    header,
                    body.len()
                ),
            });
        }
        Ok(body)
    }

    /// Retries transport errors and 5xx responses with exponential backoff.
    fn with_retries<F>(&self, uri: &SourceUri, mut call: F) -> Result<ureq::http::Response<ureq::Body>>
    where
        F: FnMut() -> std::result::Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    {
        let attempts = self.config.http_attempts.max(1);
        let mut delay = self.config.http_backoff;
        let mut last_err = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            match call() {
                Ok(resp) if resp.status().is_server_error() => {
                    last_err = Some(Error::HttpStatus {
                        uri: uri.to_string(),
                        status: resp.status().as_u16(),
                    });
                }
                Ok(resp) => return Ok(resp),
                Err(e) => {
                    last_err = Some(Error::Network {
                        uri: uri.to_string(),
                        message: e.to_string(),
                    });
                }
            }
        }
        Err(last_err.expect("at least one attempt"))
    }
}
