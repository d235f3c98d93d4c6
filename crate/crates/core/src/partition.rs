//! Splitting an ordered file list into download parts.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::record::{BlobKey, FileType, ImageRecord};

/// Limits on a single part. A part closes as soon as adding the next file
/// would exceed either one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPolicy {
    pub target_part_bytes: u64,
    pub max_part_files: usize,
}

impl Default for PartitionPolicy {
    fn default() -> Self {
        PartitionPolicy { target_part_bytes: 64 * 1024 * 1024, max_part_files: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("partition limits must both be positive")]
pub struct InvalidPolicy;

impl PartitionPolicy {
    pub fn validate(&self) -> Result<(), InvalidPolicy> {
        if self.target_part_bytes == 0 || self.max_part_files == 0 {
            return Err(InvalidPolicy);
        }
        Ok(())
    }
}

/// What a part needs to know about one file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartFile {
    pub record_id: String,
    pub blob_key: BlobKey,
    pub byte_size: u64,
    pub filetype: FileType,
}

impl PartFile {
    pub fn archive_name(&self) -> String {
        alloc::format!("{}.{}", self.record_id, self.filetype.extension())
    }
}

impl From<&ImageRecord> for PartFile {
    fn from(r: &ImageRecord) -> Self {
        PartFile {
            record_id: r.record_id.clone(),
            blob_key: r.blob_key.clone(),
            byte_size: r.byte_size,
            filetype: r.filetype,
        }
    }
}

/// Greedy, order-preserving split. Only a lone file larger than
/// `target_part_bytes` may produce a part above the byte limit.
pub fn partition(files: Vec<PartFile>, policy: &PartitionPolicy) -> Vec<Vec<PartFile>> {
    let mut parts = Vec::new();
    let mut current: Vec<PartFile> = Vec::new();
    let mut current_bytes = 0u64;
    for file in files {
        let over_count = current.len() + 1 > policy.max_part_files;
        let over_bytes = current_bytes.saturating_add(file.byte_size) > policy.target_part_bytes;
        if !current.is_empty() && (over_count || over_bytes) {
            parts.push(core::mem::take(&mut current));
            current_bytes = 0;
        }
        current_bytes = current_bytes.saturating_add(file.byte_size);
        current.push(file);
    }
    if !current.is_empty() {
        parts.push(current);
    }
    parts
}

/// Number of parts `partition` would produce, without building them.
pub fn count_parts<I: IntoIterator<Item = u64>>(sizes: I, policy: &PartitionPolicy) -> u64 {
    let mut parts = 0u64;
    let mut files = 0usize;
    let mut bytes = 0u64;
    for size in sizes {
        if files > 0 && (files + 1 > policy.max_part_files || bytes.saturating_add(size) > policy.target_part_bytes) {
            parts += 1;
            files = 0;
            bytes = 0;
        }
        files += 1;
        bytes = bytes.saturating_add(size);
    }
    if files > 0 {
        parts += 1;
    }
    parts
}
