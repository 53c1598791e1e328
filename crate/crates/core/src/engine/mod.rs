//! Stage execution: ETL, relational operators, UDF enrichment and
//! incremental application over deltas.

mod descriptor;
pub mod echo;
mod etl;
mod incremental;
mod ops;
pub mod protocol;
mod stage;
mod udf;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

pub use descriptor::{OperationDescriptor, SidecarFormat, SourceSpec, StageKind};
pub use etl::{infer_type, EtlSource};
pub use incremental::IncrementalOutput;
pub use stage::Stage;
pub use udf::{builtin_ids, run_builtin, BatchRow, UdfMode, UdfSpec};

use crate::archive::IndexOptions;
use crate::cache::SampleSource;
use crate::storage::Storage;

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Rows per UDF batch.
    pub batch_size: usize,
    /// Concurrent UDF workers (each owns at most one subprocess).
    pub workers: usize,
    /// Batches fetched ahead of the workers.
    pub readahead: usize,
    /// Per-batch UDF deadline.
    pub udf_timeout: Duration,
    pub index: IndexOptions,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            batch_size: 64,
            workers: std::thread::available_parallelism()
                .map(|n| n.get().min(4))
                .unwrap_or(1),
            readahead: 4,
            udf_timeout: Duration::from_secs(300),
            index: IndexOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Engine {
    config: EngineConfig,
    samples: SampleSource,
    udf_rows: Arc<AtomicU64>,
}

impl Engine {
    pub fn new(samples: SampleSource, config: EngineConfig) -> Self {
        Engine {
            config,
            samples,
            udf_rows: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Engine reading samples straight from storage with default settings.
    pub fn direct(storage: Storage) -> Self {
        Self::new(SampleSource::Direct(storage), EngineConfig::default())
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn storage(&self) -> &Storage {
        self.samples.storage()
    }

    pub fn samples(&self) -> &SampleSource {
        &self.samples
    }

    /// Rows handed to UDFs so far.
    pub fn udf_rows_processed(&self) -> u64 {
        self.udf_rows.load(Ordering::SeqCst)
    }
}
