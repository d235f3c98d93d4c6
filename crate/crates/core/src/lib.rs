//! Core logic of the TerraByte data portal, free of IO.
//!
//! This crate holds everything that can be decided from data alone: the
//! image metadata schema, query filtering, partitioning a result into
//! download parts, the part lifecycle and double-buffer staging gate, and
//! the client's backoff and polling policy. It needs only `alloc`.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod backoff;
pub mod catalog;
pub mod part;
pub mod partition;
pub mod pipeline;
pub mod poll;
pub mod query;
pub mod record;

pub use backoff::BackoffPolicy;
pub use catalog::{Catalog, CatalogError};
pub use part::{IllegalTransition, PartState};
pub use partition::{partition, PartFile, PartitionPolicy};
pub use pipeline::{StageEvent, StageEventKind};
pub use poll::{AbandonCause, ObservedStatus, PartPoller, PollStep};
pub use query::{Query, QueryError, QuerySummary};
pub use record::{BlobKey, CameraPose, DatasetClass, FileType, ImageRecord, RecordError};
