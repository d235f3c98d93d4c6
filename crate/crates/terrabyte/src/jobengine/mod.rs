//! Download jobs: partitioning a result list into parts and staging those
//! parts from the object store with a double buffer.
//!
//! Every job gets one worker thread. The worker stages parts strictly in
//! index order, keeps at most two of them on disk, and starts part `i + 2`
//! only once part `i` has been served and deleted (or has failed). A
//! global byte budget bounds the archives held across all jobs; a worker
//! that cannot reserve space waits until another archive is deleted.

mod worker;

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use base64::Engine as _;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use terrabyte_core::pipeline::is_finished;
use terrabyte_core::{partition, PartFile, PartState, PartitionPolicy, StageEvent, StageEventKind};

use crate::objectstore::ObjectStore;

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub staging_dir: PathBuf,
    /// Upper bound on bytes of staged archives across all jobs.
    pub staging_budget: u64,
    pub partition: PartitionPolicy,
    pub max_live_jobs: usize,
    pub job_ttl: Duration,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("the query matched no files")]
    EmptyQueryResult,
    #[error("too many live jobs")]
    TooManyLiveJobs,
    #[error("unknown job")]
    UnknownJob,
    #[error("job has no part {0}")]
    UnknownPart(usize),
    #[error("part is not ready ({0})")]
    NotReady(PartState),
    #[error("part was already served and deleted")]
    Gone,
    #[error("part failed: {0}")]
    PartFailed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A recorded state change with the instant it happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimedEvent {
    pub event: StageEvent,
    pub at: Instant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobTicket {
    pub job_id: String,
    pub part_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartInfo {
    pub index: usize,
    pub state: PartState,
    pub file_count: usize,
    pub archive_path: Option<PathBuf>,
    pub archive_bytes: Option<u64>,
    pub failure: Option<String>,
}

/// An open handle on a ready archive.
#[derive(Debug)]
pub struct OpenPart {
    pub file: fs::File,
    pub len: u64,
}

struct PartSlot {
    files: Arc<Vec<PartFile>>,
    state: PartState,
    archive_path: Option<PathBuf>,
    archive_bytes: Option<u64>,
    /// Bytes of the staging budget held by this part.
    reserved: u64,
    failure: Option<String>,
}

struct JobState {
    parts: Vec<PartSlot>,
    events: Vec<TimedEvent>,
}

impl JobState {
    fn states(&self) -> Vec<PartState> {
        self.parts.iter().map(|p| p.state).collect()
    }

    fn transition(&mut self, seq: &AtomicU64, index: usize, kind: StageEventKind) {
        let slot = &mut self.parts[index];
        slot.state = slot
            .state
            .transition(kind.target_state())
            .unwrap_or_else(|e| panic!("job engine bug: {e}"));
        self.events.push(TimedEvent {
            event: StageEvent { seq: seq.fetch_add(1, Ordering::SeqCst), part: index, kind },
            at: Instant::now(),
        });
    }
}

struct Job {
    id: String,
    owner: String,
    created: Instant,
    dir: PathBuf,
    cancelled: AtomicBool,
    state: Mutex<JobState>,
    changed: Condvar,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl Job {
    fn lock(&self) -> MutexGuard<'_, JobState> {
        self.state.lock().unwrap()
    }
}

struct Budget {
    limit: u64,
    used: Mutex<u64>,
    freed: Condvar,
}

impl Budget {
    /// Blocks until `bytes` fit under the limit. Gives up (returning false)
    /// once `cancelled` is set.
    fn reserve(&self, bytes: u64, cancelled: &AtomicBool) -> bool {
        let mut used = self.used.lock().unwrap();
        loop {
            if *used + bytes <= self.limit {
                *used += bytes;
                return true;
            }
            if cancelled.load(Ordering::SeqCst) {
                return false;
            }
            used = self.freed.wait_timeout(used, Duration::from_millis(50)).unwrap().0;
        }
    }

    fn release(&self, bytes: u64) {
        if bytes == 0 {
            return;
        }
        let mut used = self.used.lock().unwrap();
        *used = used.checked_sub(bytes).expect("staging budget released twice");
        self.freed.notify_all();
    }
}

struct Inner {
    config: EngineConfig,
    store: Arc<dyn ObjectStore>,
    jobs: Mutex<HashMap<String, Arc<Job>>>,
    budget: Budget,
    seq: AtomicU64,
    stop: Mutex<bool>,
    stop_signal: Condvar,
}

impl Inner {
    fn job(&self, job_id: &str) -> Result<Arc<Job>, EngineError> {
        self.jobs.lock().unwrap().get(job_id).cloned().ok_or(EngineError::UnknownJob)
    }
}

/// Shared handle on the job registry. Cloning is cheap.
#[derive(Clone)]
pub struct JobEngine {
    inner: Arc<Inner>,
    _reaper: Arc<ReaperHandle>,
}

struct ReaperHandle {
    inner: Arc<Inner>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl Drop for ReaperHandle {
    fn drop(&mut self) {
        *self.inner.stop.lock().unwrap() = true;
        self.inner.stop_signal.notify_all();
        if let Some(t) = self.thread.lock().unwrap().take() {
            let _ = t.join();
        }
        let ids: Vec<String> = self.inner.jobs.lock().unwrap().keys().cloned().collect();
        for id in ids {
            cleanup(&self.inner, &id);
        }
    }
}

fn new_job_id() -> String {
    let mut bytes = [0u8; 16];
    rand::rng().fill_bytes(&mut bytes);
    base64::engine::general_purpose::URL_SAFE_NO_PAD.encode(bytes)
}

impl JobEngine {
    pub fn new(config: EngineConfig, store: Arc<dyn ObjectStore>) -> io::Result<Self> {
        config.partition.validate().map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        fs::create_dir_all(&config.staging_dir)?;
        let inner = Arc::new(Inner {
            budget: Budget { limit: config.staging_budget, used: Mutex::new(0), freed: Condvar::new() },
            config,
            store,
            jobs: Mutex::new(HashMap::new()),
            seq: AtomicU64::new(0),
            stop: Mutex::new(false),
            stop_signal: Condvar::new(),
        });
        let reaper_inner = inner.clone();
        let thread = std::thread::Builder::new()
            .name("job-reaper".into())
            .spawn(move || reap_loop(reaper_inner))?;
        let reaper = ReaperHandle { inner: inner.clone(), thread: Mutex::new(Some(thread)) };
        Ok(JobEngine { inner, _reaper: Arc::new(reaper) })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.inner.config
    }

    /// Registers a job over `files` (already in catalog order) and starts
    /// staging its first part in the background. Returns without waiting
    /// for any staging to finish.
    pub fn create_job(&self, owner: &str, files: Vec<PartFile>) -> Result<JobTicket, EngineError> {
        if files.is_empty() {
            return Err(EngineError::EmptyQueryResult);
        }
        let parts = partition(files, &self.inner.config.partition);
        let part_count = parts.len();

        let job = {
            let mut jobs = self.inner.jobs.lock().unwrap();
            let live = jobs.values().filter(|j| !is_finished(&j.lock().states())).count();
            if live >= self.inner.config.max_live_jobs {
                return Err(EngineError::TooManyLiveJobs);
            }
            let mut id = new_job_id();
            while jobs.contains_key(&id) {
                id = new_job_id();
            }
            let job = Arc::new(Job {
                dir: self.inner.config.staging_dir.join(&id),
                id: id.clone(),
                owner: owner.to_owned(),
                created: Instant::now(),
                cancelled: AtomicBool::new(false),
                state: Mutex::new(JobState {
                    parts: parts
                        .into_iter()
                        .map(|files| PartSlot {
                            files: Arc::new(files),
                            state: PartState::Pending,
                            archive_path: None,
                            archive_bytes: None,
                            reserved: 0,
                            failure: None,
                        })
                        .collect(),
                    events: Vec::new(),
                }),
                changed: Condvar::new(),
                worker: Mutex::new(None),
            });
            jobs.insert(id, job.clone());
            job
        };

        fs::create_dir_all(&job.dir)?;
        let inner = self.inner.clone();
        let worker_job = job.clone();
        let handle = std::thread::Builder::new()
            .name(format!("stage-{}", &job.id[..6]))
            .spawn(move || worker::run_staging(&inner, &worker_job))?;
        *job.worker.lock().unwrap() = Some(handle);
        Ok(JobTicket { job_id: job.id.clone(), part_count })
    }

    pub fn job_owner(&self, job_id: &str) -> Result<String, EngineError> {
        Ok(self.inner.job(job_id)?.owner.clone())
    }

    pub fn part_count(&self, job_id: &str) -> Result<usize, EngineError> {
        Ok(self.inner.job(job_id)?.lock().parts.len())
    }

    pub fn part_status(&self, job_id: &str, index: usize) -> Result<PartState, EngineError> {
        let job = self.inner.job(job_id)?;
        let st = job.lock();
        st.parts.get(index).map(|p| p.state).ok_or(EngineError::UnknownPart(index))
    }

    pub fn parts(&self, job_id: &str) -> Result<Vec<PartInfo>, EngineError> {
        let job = self.inner.job(job_id)?;
        let st = job.lock();
        Ok(st
            .parts
            .iter()
            .enumerate()
            .map(|(index, p)| PartInfo {
                index,
                state: p.state,
                file_count: p.files.len(),
                archive_path: p.archive_path.clone(),
                archive_bytes: p.archive_bytes,
                failure: p.failure.clone(),
            })
            .collect())
    }

    /// The job's event log, totally ordered by sequence number.
    pub fn events(&self, job_id: &str) -> Result<Vec<TimedEvent>, EngineError> {
        Ok(self.inner.job(job_id)?.lock().events.clone())
    }

    /// Waits until `pred` holds for the job's part states or the timeout
    /// elapses. Returns the last observed states.
    pub fn wait_for(
        &self,
        job_id: &str,
        timeout: Duration,
        mut pred: impl FnMut(&[PartState]) -> bool,
    ) -> Result<Vec<PartState>, EngineError> {
        let job = self.inner.job(job_id)?;
        let deadline = Instant::now() + timeout;
        let mut st = job.lock();
        loop {
            let states = st.states();
            let now = Instant::now();
            if pred(&states) || now >= deadline {
                return Ok(states);
            }
            st = job.changed.wait_timeout(st, deadline - now).unwrap().0;
        }
    }

    /// Opens a ready part for streaming. The part stays ready until
    /// [`JobEngine::complete_serve`] is called, so an interrupted transfer
    /// can be retried.
    pub fn open_part(&self, job_id: &str, index: usize) -> Result<OpenPart, EngineError> {
        let job = self.inner.job(job_id)?;
        let st = job.lock();
        let slot = st.parts.get(index).ok_or(EngineError::UnknownPart(index))?;
        match slot.state {
            PartState::Pending | PartState::Staging => Err(EngineError::NotReady(slot.state)),
            PartState::Served | PartState::Deleted => Err(EngineError::Gone),
            PartState::Failed => Err(EngineError::PartFailed(slot.failure.clone().unwrap_or_default())),
            PartState::Ready => {
                let path = slot.archive_path.as_ref().expect("ready part has an archive");
                let file = fs::File::open(path)?;
                let len = file.metadata()?.len();
                Ok(OpenPart { file, len })
            }
        }
    }

    /// Marks a part as fully delivered: `Ready -> Served -> Deleted`, with
    /// the archive removed and its budget released. Idempotent once the
    /// part is gone.
    pub fn complete_serve(&self, job_id: &str, index: usize) -> Result<(), EngineError> {
        let job = self.inner.job(job_id)?;
        let mut st = job.lock();
        let state = st.parts.get(index).ok_or(EngineError::UnknownPart(index))?.state;
        match state {
            PartState::Ready => {}
            PartState::Served | PartState::Deleted => return Ok(()),
            other => return Err(EngineError::NotReady(other)),
        }
        st.transition(&self.inner.seq, index, StageEventKind::Served);
        let slot = &mut st.parts[index];
        if let Some(path) = slot.archive_path.take() {
            if let Err(e) = fs::remove_file(&path) {
                tracing::warn!(path = %path.display(), "could not delete served archive: {e}");
            }
        }
        self.inner.budget.release(std::mem::take(&mut slot.reserved));
        st.transition(&self.inner.seq, index, StageEventKind::Deleted);
        drop(st);
        job.changed.notify_all();
        Ok(())
    }

    /// Copies a ready part into `out` and, if the copy completes, marks it
    /// served. A failed copy leaves the part ready.
    pub fn serve_part(&self, job_id: &str, index: usize, out: &mut dyn Write) -> Result<u64, EngineError> {
        let mut part = self.open_part(job_id, index)?;
        let n = io::copy(&mut part.file, out)?;
        out.flush()?;
        if n != part.len {
            return Err(EngineError::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "archive changed while serving")));
        }
        self.complete_serve(job_id, index)?;
        Ok(n)
    }

    /// Deletes every archive of the job and forgets it. Unknown ids are
    /// accepted, which makes the call idempotent.
    pub fn cleanup_job(&self, job_id: &str) {
        cleanup(&self.inner, job_id);
    }

    pub fn job_ids(&self) -> Vec<String> {
        self.inner.jobs.lock().unwrap().keys().cloned().collect()
    }

    pub fn live_jobs(&self) -> usize {
        let jobs = self.inner.jobs.lock().unwrap();
        jobs.values().filter(|j| !is_finished(&j.lock().states())).count()
    }

    /// Bytes of staging budget currently reserved.
    pub fn budget_in_use(&self) -> u64 {
        *self.inner.budget.used.lock().unwrap()
    }

    /// Bytes actually present under the staging directory.
    pub fn staging_disk_usage(&self) -> io::Result<u64> {
        dir_size(&self.inner.config.staging_dir)
    }
}

fn dir_size(dir: &Path) -> io::Result<u64> {
    let mut total = 0;
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let meta = entry.metadata()?;
        total += if meta.is_dir() { dir_size(&entry.path())? } else { meta.len() };
    }
    Ok(total)
}

fn cleanup(inner: &Inner, job_id: &str) {
    let Some(job) = inner.jobs.lock().unwrap().remove(job_id) else { return };
    job.cancelled.store(true, Ordering::SeqCst);
    job.changed.notify_all();
    let worker = job.worker.lock().unwrap().take();
    if let Some(handle) = worker {
        if handle.thread().id() != std::thread::current().id() {
            let _ = handle.join();
        }
    }
    let mut st = job.lock();
    for slot in &mut st.parts {
        if let Some(path) = slot.archive_path.take() {
            let _ = fs::remove_file(path);
        }
        inner.budget.release(std::mem::take(&mut slot.reserved));
    }
    drop(st);
    if let Err(e) = fs::remove_dir_all(&job.dir) {
        if e.kind() != io::ErrorKind::NotFound {
            tracing::warn!(job = %job.id, "could not remove staging dir: {e}");
        }
    }
}

fn reap_loop(inner: Arc<Inner>) {
    let ttl = inner.config.job_ttl;
    let interval = (ttl / 4).clamp(Duration::from_millis(10), Duration::from_secs(60));
    let mut stop = inner.stop.lock().unwrap();
    while !*stop {
        stop = inner.stop_signal.wait_timeout(stop, interval).unwrap().0;
        if *stop {
            break;
        }
        drop(stop);
        let expired: Vec<String> = inner
            .jobs
            .lock()
            .unwrap()
            .values()
            .filter(|j| j.created.elapsed() >= ttl)
            .map(|j| j.id.clone())
            .collect();
        for id in expired {
            tracing::info!(job = %id, "job expired");
            cleanup(&inner, &id);
        }
        stop = inner.stop.lock().unwrap();
    }
}
