use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use terrabyte_core::pipeline::{is_finished, next_to_stage};
use terrabyte_core::{PartFile, StageEventKind};

use super::{Inner, Job};
use crate::archive::{predicted_size, ArchiveWriter};
use crate::objectstore::StoreError;

#[derive(Debug, thiserror::Error)]
enum StageFailure {
    #[error("storage unavailable: {0}")]
    Storage(#[from] StoreError),
    #[error("part needs {needed} bytes but the staging budget is {budget}")]
    DiskBudgetExceeded { needed: u64, budget: u64 },
    #[error("blob sizes differ from the catalog")]
    SizeMismatch,
    #[error("staging disk error: {0}")]
    Io(#[from] io::Error),
    #[error("cancelled")]
    Cancelled,
}

pub(super) fn run_staging(inner: &Inner, job: &Job) {
    loop {
        let (index, files) = {
            let mut st = job.lock();
            let index = loop {
                if job.cancelled.load(Ordering::SeqCst) || is_finished(&st.states()) {
                    return;
                }
                if let Some(i) = next_to_stage(&st.states()) {
                    break i;
                }
                st = job.changed.wait(st).unwrap();
            };
            st.transition(&inner.seq, index, StageEventKind::StagingBegin);
            (index, Arc::clone(&st.parts[index].files))
        };
        job.changed.notify_all();

        let outcome = stage_part(inner, job, index, &files);
        let mut st = job.lock();
        match outcome {
            Ok((path, bytes, reserved)) => {
                let slot = &mut st.parts[index];
                slot.archive_path = Some(path);
                slot.archive_bytes = Some(bytes);
                slot.reserved = reserved;
                st.transition(&inner.seq, index, StageEventKind::Ready);
            }
            Err(StageFailure::Cancelled) => return,
            Err(e) => {
                tracing::warn!(job = %job.id, part = index, "staging failed: {e}");
                st.parts[index].failure = Some(e.to_string());
                st.transition(&inner.seq, index, StageEventKind::Failed);
            }
        }
        drop(st);
        job.changed.notify_all();
    }
}

/// Fetches a part's blobs and writes its archive. On success returns the
/// archive path, its size, and the budget bytes still held for it.
fn stage_part(inner: &Inner, job: &Job, index: usize, files: &[PartFile]) -> Result<(PathBuf, u64, u64), StageFailure> {
    let needed = predicted_size(files.iter().map(|f| f.byte_size));
    let limit = inner.budget.limit;
    if needed > limit {
        return Err(StageFailure::DiskBudgetExceeded { needed, budget: limit });
    }
    if !inner.budget.reserve(needed, &job.cancelled) {
        return Err(StageFailure::Cancelled);
    }
    match write_part(inner, job, index, files) {
        Ok((path, bytes)) if bytes <= needed => {
            inner.budget.release(needed - bytes);
            Ok((path, bytes, bytes))
        }
        Ok((path, _)) => {
            let _ = fs::remove_file(path);
            inner.budget.release(needed);
            Err(StageFailure::SizeMismatch)
        }
        Err(e) => {
            inner.budget.release(needed);
            Err(e)
        }
    }
}

fn write_part(inner: &Inner, job: &Job, index: usize, files: &[PartFile]) -> Result<(PathBuf, u64), StageFailure> {
    let final_path = job.dir.join(format!("part-{index:05}.tar"));
    let partial = final_path.with_extension("tar.partial");
    let result = (|| {
        let mut w = ArchiveWriter::new(BufWriter::new(fs::File::create(&partial)?));
        for f in files {
            if job.cancelled.load(Ordering::SeqCst) {
                return Err(StageFailure::Cancelled);
            }
            let data = inner.store.get(&f.blob_key)?;
            if data.len() as u64 != f.byte_size {
                return Err(StageFailure::SizeMismatch);
            }
            w.append(&f.archive_name(), &data)?;
        }
        let mut out = w.finish()?;
        out.flush()?;
        let file = out.into_inner().map_err(|e| e.into_error())?;
        let len = file.metadata()?.len();
        fs::rename(&partial, &final_path)?;
        Ok(len)
    })();
    match result {
        Ok(len) => Ok((final_path, len)),
        Err(e) => {
            let _ = fs::remove_file(&partial);
            Err(e)
        }
    }
}
