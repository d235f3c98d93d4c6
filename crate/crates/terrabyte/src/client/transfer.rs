//! The download loop: one part at a time, polling with backoff, then
//! fetching and unpacking the part's archive.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use terrabyte_core::{AbandonCause, BackoffPolicy, ObservedStatus, PartPoller, PartState, PollStep, Query};

use super::http::{Client, ClientError};
use crate::archive::{extract_verified, ExtractError, ExtractedFile};

/// Sleeps on behalf of the download loop, so tests can run it without
/// waiting.
pub trait Clock {
    fn sleep(&self, d: Duration);
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Records requested sleeps instead of sleeping.
#[derive(Debug, Default)]
pub struct FakeClock {
    sleeps: Mutex<Vec<Duration>>,
}

impl FakeClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sleeps(&self) -> Vec<Duration> {
        self.sleeps.lock().unwrap().clone()
    }

    pub fn total(&self) -> Duration {
        self.sleeps.lock().unwrap().iter().sum()
    }
}

impl Clock for FakeClock {
    fn sleep(&self, d: Duration) {
        self.sleeps.lock().unwrap().push(d);
    }
}

/// Result of a fetch attempt that did not produce a readable stream.
#[derive(Debug)]
pub enum FetchError {
    /// The transfer broke off or never started; the part may be retried.
    Interrupted(String),
    /// The server says the part was already consumed.
    Gone,
    /// Any other refusal.
    Refused(ClientError),
}

/// Where parts come from. The HTTP client is the real implementation;
/// tests substitute scripted sources.
pub trait PartSource {
    fn status(&self, job_id: &str, index: usize) -> ObservedStatus;
    fn fetch(&self, job_id: &str, index: usize) -> Result<Box<dyn Read + '_>, FetchError>;
}

impl PartSource for Client {
    fn status(&self, job_id: &str, index: usize) -> ObservedStatus {
        match self.part_status(job_id, index) {
            Ok(s) if s.ready => ObservedStatus::Ready,
            Ok(s) if s.state == PartState::Failed => ObservedStatus::Failed,
            Ok(_) => ObservedStatus::NotReady,
            Err(e) if e.is_transport() => ObservedStatus::Unreachable,
            Err(e) => match e.code() {
                Some("part_gone") => ObservedStatus::Gone,
                Some("part_failed") => ObservedStatus::Failed,
                _ if matches!(e, ClientError::ServerError { .. }) => ObservedStatus::Unreachable,
                _ => ObservedStatus::Failed,
            },
        }
    }

    fn fetch(&self, job_id: &str, index: usize) -> Result<Box<dyn Read + '_>, FetchError> {
        match self.fetch_part(job_id, index) {
            Ok(resp) => Ok(Box::new(resp)),
            Err(e) if e.is_transport() => Err(FetchError::Interrupted(e.to_string())),
            Err(e) => match e.code() {
                Some("part_gone") => Err(FetchError::Gone),
                Some("not_ready") => Err(FetchError::Interrupted(e.to_string())),
                _ => Err(FetchError::Refused(e)),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgressEvent {
    Polled,
    Ready,
    Fetched,
    Extracted,
    Abandoned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress<'a> {
    pub job_id: &'a str,
    pub part: usize,
    pub event: ProgressEvent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PartOutcome {
    Completed { files: Vec<PathBuf>, bytes: u64 },
    Abandoned(AbandonCause),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSettings {
    pub backoff: BackoffPolicy,
    pub max_tries: u32,
}

/// Counts bytes and remembers whether the underlying stream failed, so a
/// broken transfer can be told apart from a bad archive.
struct TrackingReader<R> {
    inner: R,
    bytes: u64,
    failed: bool,
}

impl<R: Read> Read for TrackingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self.inner.read(buf) {
            Ok(n) => {
                self.bytes += n as u64;
                Ok(n)
            }
            Err(e) => {
                self.failed = true;
                Err(e)
            }
        }
    }
}

/// Unpacks an archive into a hidden directory next to `dest`, then moves
/// each file into `dest`. A file only ever appears at its final path
/// complete.
pub fn extract_atomically<R: Read>(reader: R, dest: &Path, tmp_prefix: &str) -> Result<Vec<ExtractedFile>, ExtractError> {
    let tmp = dest.join(format!("{tmp_prefix}.{:016x}.tmp", rand::random::<u64>()));
    let write_err = |path: &Path, source| ExtractError::Write { path: path.to_owned(), source };
    fs::create_dir_all(&tmp).map_err(|e| write_err(&tmp, e))?;
    let result = extract_verified(reader, &tmp).and_then(|files| {
        let mut moved = Vec::with_capacity(files.len());
        for f in files {
            let final_path = dest.join(&f.name);
            fs::rename(&f.path, &final_path).map_err(|e| write_err(&final_path, e))?;
            moved.push(ExtractedFile { path: final_path, ..f });
        }
        Ok(moved)
    });
    let _ = fs::remove_dir_all(&tmp);
    result
}

enum AttemptError {
    Interrupted,
    Gone,
    Fatal,
}

fn fetch_and_extract(
    source: &dyn PartSource,
    job_id: &str,
    index: usize,
    dest: &Path,
    progress: &mut dyn FnMut(Progress<'_>),
) -> Result<Vec<ExtractedFile>, AttemptError> {
    let reader = match source.fetch(job_id, index) {
        Ok(r) => r,
        Err(FetchError::Interrupted(msg)) => {
            tracing::info!(job = job_id, part = index, "fetch interrupted: {msg}");
            return Err(AttemptError::Interrupted);
        }
        Err(FetchError::Gone) => return Err(AttemptError::Gone),
        Err(FetchError::Refused(e)) => {
            tracing::warn!(job = job_id, part = index, "fetch refused: {e}");
            return Err(AttemptError::Fatal);
        }
    };
    let mut tracked = TrackingReader { inner: reader, bytes: 0, failed: false };
    let tmp_prefix = format!(".tbc-part-{job_id}-{index}");
    let result = extract_atomically(&mut tracked, dest, &tmp_prefix);
    match result {
        Ok(files) => {
            progress(Progress { job_id, part: index, event: ProgressEvent::Fetched });
            Ok(files)
        }
        Err(e) if tracked.failed => {
            tracing::info!(job = job_id, part = index, bytes = tracked.bytes, "transfer broke off: {e}");
            Err(AttemptError::Interrupted)
        }
        Err(e) => {
            tracing::warn!(job = job_id, part = index, "bad archive: {e}");
            Err(AttemptError::Fatal)
        }
    }
}

/// Polls one part until it is ready, then fetches and unpacks it into
/// `dest`. Gives up after `max_tries` consecutive negative answers.
pub fn get_files(
    source: &dyn PartSource,
    clock: &dyn Clock,
    settings: LoopSettings,
    job_id: &str,
    index: usize,
    dest: &Path,
    progress: &mut dyn FnMut(Progress<'_>),
) -> PartOutcome {
    let mut poller = PartPoller::new(settings.backoff, settings.max_tries);
    let abandon = |cause, progress: &mut dyn FnMut(Progress<'_>)| {
        progress(Progress { job_id, part: index, event: ProgressEvent::Abandoned });
        PartOutcome::Abandoned(cause)
    };
    loop {
        let status = source.status(job_id, index);
        progress(Progress { job_id, part: index, event: ProgressEvent::Polled });
        match poller.on_status(status) {
            PollStep::Fetch => {
                progress(Progress { job_id, part: index, event: ProgressEvent::Ready });
                match fetch_and_extract(source, job_id, index, dest, progress) {
                    Ok(files) => {
                        progress(Progress { job_id, part: index, event: ProgressEvent::Extracted });
                        let bytes = files.iter().map(|f| f.size).sum();
                        return PartOutcome::Completed { files: files.into_iter().map(|f| f.path).collect(), bytes };
                    }
                    Err(AttemptError::Interrupted) => match poller.on_fetch_interrupted() {
                        PollStep::Abandon(cause) => return abandon(cause, progress),
                        _ => continue,
                    },
                    Err(AttemptError::Gone) => return abandon(AbandonCause::Gone, progress),
                    Err(AttemptError::Fatal) => return abandon(AbandonCause::Extraction, progress),
                }
            }
            PollStep::PollAfter(d) => clock.sleep(d),
            PollStep::PollNow => {}
            PollStep::AbandonAfter(d, cause) => {
                clock.sleep(d);
                return abandon(cause, progress);
            }
            PollStep::Abandon(cause) => return abandon(cause, progress),
        }
    }
}

mod secs_f64 {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownloadReport {
    pub job_id: String,
    pub parts_total: usize,
    pub parts_completed: usize,
    pub parts_abandoned: Vec<usize>,
    /// Why each abandoned part was given up.
    pub abandon_causes: BTreeMap<usize, AbandonCause>,
    pub files_written: u64,
    pub bytes_written: u64,
    /// Wall-clock duration in seconds.
    #[serde(with = "secs_f64")]
    pub wall_time: Duration,
}

/// Runs every part of an existing job in ascending order, one at a time.
/// Once the server stops answering, the remaining parts are abandoned
/// without further requests.
pub fn run_job(
    source: &dyn PartSource,
    clock: &dyn Clock,
    settings: LoopSettings,
    job_id: &str,
    part_count: usize,
    dest: &Path,
    progress: &mut dyn FnMut(Progress<'_>),
) -> DownloadReport {
    let start = Instant::now();
    let mut report = DownloadReport {
        job_id: job_id.to_owned(),
        parts_total: part_count,
        parts_completed: 0,
        parts_abandoned: Vec::new(),
        abandon_causes: BTreeMap::new(),
        files_written: 0,
        bytes_written: 0,
        wall_time: Duration::ZERO,
    };
    let mut unreachable = false;
    for index in 0..part_count {
        let outcome = if unreachable {
            progress(Progress { job_id, part: index, event: ProgressEvent::Abandoned });
            PartOutcome::Abandoned(AbandonCause::Unreachable)
        } else {
            get_files(source, clock, settings, job_id, index, dest, progress)
        };
        match outcome {
            PartOutcome::Completed { files, bytes } => {
                report.parts_completed += 1;
                report.files_written += files.len() as u64;
                report.bytes_written += bytes;
            }
            PartOutcome::Abandoned(cause) => {
                unreachable |= cause == AbandonCause::Unreachable;
                report.parts_abandoned.push(index);
                report.abandon_causes.insert(index, cause);
            }
        }
    }
    report.wall_time = start.elapsed();
    report
}

impl Client {
    /// Creates a job for `q` and downloads all of its parts into `dest`.
    pub fn download_with(
        &self,
        q: &Query,
        dest: &Path,
        settings: LoopSettings,
        clock: &dyn Clock,
        progress: &mut dyn FnMut(Progress<'_>),
    ) -> Result<DownloadReport, ClientError> {
        q.validate_filter()?;
        fs::create_dir_all(dest)?;
        let start = Instant::now();
        let ticket = self.create_job(q)?;
        let mut report = run_job(self, clock, settings, &ticket.job_id, ticket.part_count, dest, progress);
        report.wall_time = start.elapsed();
        Ok(report)
    }

    pub fn download(&self, q: &Query, dest: &Path, settings: LoopSettings) -> Result<DownloadReport, ClientError> {
        self.download_with(q, dest, settings, &SystemClock, &mut |_| {})
    }
}
