//! Node-local persistence: metadata log, content-addressed blobs, the
//! re-identification link map and the file catalogue.
//!
//! On-disk layout under a node's data directory:
//!
//! ```text
//! meta.log        one canonical JSON record per line
//! blobs/<guid>    pixel blobs, content addressed
//! linkmap.log     pseudonym -> identity entries, mode 0600
//! catalogue.log   catalogue operations
//! ```

mod catalogue;
mod local;
mod log;

use thiserror::Error;

pub use catalogue::{validate_lfn, Catalogue, CatalogueEntry, Replica};
pub use local::{Integrity, LocalStore, StoreSnapshot};
pub use log::JsonLog;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("lfn {0} already registered with a different guid")]
    LfnConflict(String),
    #[error("guid {guid} already registered as {lfn}")]
    GuidConflict { guid: String, lfn: String },
    #[error("invalid lfn {0:?}")]
    InvalidLfn(String),
    #[error("invalid catalogue entry: {0}")]
    InvalidEntry(String),
    #[error("no local replica of {0}")]
    NoLocalReplica(String),
    #[error("corrupt log {file} line {line}: {reason}")]
    CorruptLog {
        file: String,
        line: usize,
        reason: String,
    },
}
