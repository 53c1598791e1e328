use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad expression, unknown reference, bad flag value.
    User,
    /// Join/schema/UDF failures and corrupt inputs.
    Data,
    /// Filesystem or network failures.
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::User => 2,
            ErrorClass::Data => 3,
            ErrorClass::Io => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    // storage
    #[error("object not found: {0}")]
    NotFound(String),
    #[error("unsupported URI scheme in {0:?} (expected file://, http:// or https://)")]
    SchemeUnsupported(String),
    #[error("invalid URI {uri:?}: {reason}")]
    BadUri { uri: String, reason: String },
    #[error("invalid byte range: {0}")]
    BadRange(String),
    #[error("range [{offset}, {offset}+{length}) out of bounds for {uri} of size {size}")]
    RangeOutOfBounds {
        uri: String,
        offset: u64,
        length: u64,
        size: u64,
    },
    #[error("server ignored Range header for {0} (status 200)")]
    HttpRangeUnsupported(String),
    #[error("HTTP {status} for {uri}")]
    HttpStatus { uri: String, status: u16 },
    #[error("I/O failure on {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("network failure on {uri}: {message}")]
    Network { uri: String, message: String },

    // archive
    #[error("{uri}: not a tar archive (bad magic at header offset {offset})")]
    BadMagic { uri: String, offset: u64 },
    #[error("{uri}: header checksum mismatch at offset {offset} (stored {stored}, computed {computed})")]
    BadChecksum {
        uri: String,
        offset: u64,
        stored: u64,
        computed: u64,
    },
    #[error("{uri}: archive truncated at offset {offset}")]
    TruncatedArchive { uri: String, offset: u64 },
    #[error("{uri}: unsupported tar header typeflag {flag:?} at offset {offset}")]
    UnsupportedHeader { uri: String, flag: char, offset: u64 },
    #[error("{uri}: compressed archives are not randomly addressable ({kind})")]
    CompressedArchive { uri: String, kind: &'static str },
    #[error("{uri}: duplicate member path {path:?}")]
    DuplicateMember { uri: String, path: String },

    // table
    #[error("column file: bad magic")]
    ColumnBadMagic,
    #[error("column file: unsupported format version {0}")]
    ColumnBadVersion(u16),
    #[error("column file truncated: {0}")]
    Truncated(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("corrupt manifest {path}: {reason}")]
    CorruptManifest { path: PathBuf, reason: String },
    #[error("missing manifest in {0}")]
    MissingManifest(PathBuf),
    #[error("invalid schema: {0}")]
    BadSchema(String),

    // expr
    #[error("syntax error at byte {offset}: expected {expected}, found {found}")]
    Syntax {
        offset: usize,
        expected: String,
        found: String,
    },
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("unknown parameter @{0}")]
    UnknownParam(String),
    #[error("type mismatch in {context}: {left} vs {right}")]
    TypeMismatch {
        context: String,
        left: String,
        right: String,
    },
    #[error("vector dimension mismatch in {context}: {left} vs {right}")]
    DimMismatch {
        context: String,
        left: u32,
        right: u32,
    },
    #[error("unknown function {0:?}")]
    UnknownFunction(String),
    #[error("bad parameter value for {name}: {reason}")]
    BadParam { name: String, reason: String },

    // engine
    #[error("sidecar row with key {0:?} has no matching sample")]
    JoinKeyMissing(String),
    #[error("duplicate join key {0:?}")]
    DuplicateKey(String),
    #[error("field {field:?} has irreconcilable types: {detail}")]
    SchemaConflict { field: String, detail: String },
    #[error("field {0:?} has vectors of unequal length")]
    RaggedVector(String),
    #[error("bad sidecar {uri}: {reason}")]
    BadSidecar { uri: String, reason: String },
    #[error("column {0:?} already exists")]
    ColumnExists(String),
    #[error("column {column:?} of type {ty} cannot be ordered")]
    NonOrderableType { column: String, ty: String },
    #[error("schemas differ: {0}")]
    SchemaMismatch(String),
    #[error("duplicate _uid {0} across union inputs")]
    DuplicateUid(String),
    #[error("unknown UDF {0:?}")]
    UnknownUdf(String),
    #[error("UDF {udf} crashed: {diagnostics}")]
    UdfCrashed { udf: String, diagnostics: String },
    #[error("UDF {udf} produced bad output: {reason}")]
    UdfBadOutput { udf: String, reason: String },
    #[error("UDF protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("UDF {udf} timed out after {secs} s")]
    Timeout { udf: String, secs: u64 },
    #[error("stage kind {0} is not row-local and must be fully recomputed")]
    NotRowLocal(String),
    #[error("descriptor mismatch: {0}")]
    DescriptorMismatch(String),

    // catalog
    #[error("dataset not found: {0}")]
    DatasetNotFound(String),
    #[error("invalid dataset name {0:?}")]
    BadName(String),
    #[error("catalog locked by another writer ({0})")]
    CatalogLocked(PathBuf),
    #[error("directory {0} is not empty")]
    NonEmptyDir(PathBuf),
    #[error("no catalog at {0}")]
    NoCatalog(PathBuf),

    // cache
    #[error("cache entry {key} corrupt: {reason}")]
    CorruptEntry { key: String, reason: String },

    // cli / pipeline
    #[error("invalid shard: rank {rank} >= world size {world}")]
    BadShard { rank: u32, world: u32 },
    #[error("invalid pipeline: {0}")]
    BadPipeline(String),
    #[error("invalid argument: {0}")]
    BadArgument(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            NotFound(_) | Io { .. } | Network { .. } | HttpStatus { .. } | CatalogLocked(_) => {
                ErrorClass::Io
            }
            SchemeUnsupported(_)
            | BadUri { .. }
            | BadRange(_)
            | Syntax { .. }
            | UnknownColumn(_)
            | UnknownParam(_)
            | TypeMismatch { .. }
            | DimMismatch { .. }
            | UnknownFunction(_)
            | BadParam { .. }
            | ColumnExists(_)
            | NonOrderableType { .. }
            | UnknownUdf(_)
            | DatasetNotFound(_)
            | BadName(_)
            | NonEmptyDir(_)
            | NoCatalog(_)
            | BadShard { .. }
            | BadPipeline(_)
            | BadArgument(_) => ErrorClass::User,
            _ => ErrorClass::Data,
        }
    }
}
