//! In-memory metadata catalog.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::partition::{count_parts, PartitionPolicy};
use crate::query::{Query, QueryError, QuerySummary};
use crate::record::{ImageRecord, RecordError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CatalogError {
    #[error("duplicate record id {0:?}")]
    DuplicateRecordId(String),
    #[error("record {record_id:?} violates an invariant: {source}")]
    InvariantViolation { record_id: String, source: RecordError },
    #[error("malformed query: {0}")]
    MalformedQuery(#[from] QueryError),
    #[error("sample size must be at least 1")]
    ZeroSampleSize,
}

/// Records kept sorted by `(capture_datetime, record_id)`, which is the
/// order every listing and partitioning uses.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    records: Vec<ImageRecord>,
    ids: BTreeSet<String>,
}

fn order_key(r: &ImageRecord) -> (chrono::DateTime<chrono::Utc>, &str) {
    (r.capture_datetime, r.record_id.as_str())
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn get(&self, record_id: &str) -> Option<&ImageRecord> {
        if !self.ids.contains(record_id) {
            return None;
        }
        self.records.iter().find(|r| r.record_id == record_id)
    }

    /// Adds a batch atomically: either every record is added or none is.
    pub fn ingest(&mut self, batch: Vec<ImageRecord>) -> Result<usize, CatalogError> {
        let mut seen = BTreeSet::new();
        for r in &batch {
            r.validate().map_err(|source| CatalogError::InvariantViolation {
                record_id: r.record_id.clone(),
                source,
            })?;
            if self.ids.contains(&r.record_id) || !seen.insert(r.record_id.as_str()) {
                return Err(CatalogError::DuplicateRecordId(r.record_id.clone()));
            }
        }
        let added = batch.len();
        for r in batch {
            self.ids.insert(r.record_id.clone());
            self.records.push(r);
        }
        self.records.sort_by(|a, b| order_key(a).cmp(&order_key(b)));
        Ok(added)
    }

    pub fn iter_matches<'a>(&'a self, q: &'a Query) -> impl Iterator<Item = &'a ImageRecord> + 'a {
        self.records.iter().filter(move |r| q.matches(r))
    }

    pub fn list_matches(&self, q: &Query) -> Result<Vec<&ImageRecord>, CatalogError> {
        q.validate_filter()?;
        Ok(self.records.iter().filter(|r| q.matches(r)).collect())
    }

    pub fn count_matches(&self, q: &Query) -> Result<usize, CatalogError> {
        q.validate_filter()?;
        Ok(self.iter_matches(q).count())
    }

    /// File count, part count and byte total for a query, with parts counted
    /// exactly as a download job would split them.
    pub fn summarize(&self, q: &Query, policy: &PartitionPolicy) -> Result<QuerySummary, CatalogError> {
        q.validate_filter()?;
        let mut file_count = 0u64;
        let mut total_bytes = 0u64;
        let part_count = count_parts(
            self.iter_matches(q).map(|r| {
                file_count += 1;
                total_bytes += r.byte_size;
                r.byte_size
            }),
            policy,
        );
        Ok(QuerySummary { file_count, part_count, total_bytes })
    }

    /// Up to `per_filetype` distinct matches of each selected filetype,
    /// drawn uniformly without replacement. Output is grouped by filetype
    /// and kept in catalog order inside each group.
    pub fn sample_matches(&self, q: &Query, per_filetype: usize, seed: u64) -> Result<Vec<&ImageRecord>, CatalogError> {
        q.validate_filter()?;
        if per_filetype == 0 {
            return Err(CatalogError::ZeroSampleSize);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for ft in &q.filetypes {
            let pool: Vec<&ImageRecord> = self.records.iter().filter(|r| r.filetype == *ft && q.matches(r)).collect();
            let amount = per_filetype.min(pool.len());
            let mut picked = rand::seq::index::sample(&mut rng, pool.len(), amount).into_vec();
            picked.sort_unstable();
            out.extend(picked.into_iter().map(|i| pool[i]));
        }
        Ok(out)
    }
}
