//! Load harness: concurrent on-demand downloads against precompiled
//! fetches, and many small files against a few large ones.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use chrono::{TimeZone, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use terrabyte_core::{BackoffPolicy, BlobKey, CameraPose, Catalog, DatasetClass, FileType, ImageRecord, PartitionPolicy, Query};

use super::png;
use crate::client::{Client, ClientConfig, ClientError, LoopSettings, TlsTrust};
use crate::gateway::{build_precompiled, GatewayConfig, PasswordHash, PrecompiledEntry, RunningGateway, UserEntry};
use crate::objectstore::{LatencyModel, LocalDirStore, ObjectStore};
use crate::snapshot::save_catalog;

const PRECOMPILED_ID: &str = "bench";
const PASSWORD: &str = "bench-password";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("harness timed out after {0:?}")]
    HarnessTimeout(Duration),
    #[error("setup: {0}")]
    Setup(String),
    #[error("user {user}: {source}")]
    Client { user: usize, source: ClientError },
    #[error("user {user}: {abandoned} of {total} parts abandoned")]
    Incomplete { user: usize, abandoned: usize, total: usize },
}

fn setup(e: impl fmt::Display) -> BenchError {
    BenchError::Setup(e.to_string())
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        f64::deserialize(d).map(Duration::from_secs_f64)
    }
}

fn mb_per_s(bytes: u64, t: Duration) -> f64 {
    bytes as f64 / 1e6 / t.as_secs_f64().max(1e-9)
}

/// Settings of a parallel-user run.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub n_users: usize,
    pub query: Query,
    pub latency: LatencyModel,
    pub partition: PartitionPolicy,
    /// Client polling schedule used by every simulated user.
    pub backoff: BackoffPolicy,
    pub max_tries: u32,
    /// Upper bound on each phase of the run.
    pub timeout: Duration,
}

impl BenchConfig {
    pub fn new(n_users: usize, query: Query, latency: LatencyModel) -> Self {
        BenchConfig {
            n_users,
            query,
            latency,
            partition: PartitionPolicy::default(),
            backoff: BackoffPolicy { initial_ms: 50, factor: 1.6, cap_ms: 1000 },
            max_tries: 200,
            timeout: Duration::from_secs(600),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRun {
    pub user: usize,
    pub files: u64,
    pub bytes: u64,
    #[serde(with = "secs")]
    pub download_time: Duration,
    /// On-demand throughput in MB/s.
    pub speed: f64,
    #[serde(with = "secs")]
    pub precompiled_time: Duration,
    pub precompiled_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub latency: LatencyModel,
    pub n_users: usize,
    pub file_count: u64,
    pub total_bytes: u64,
    /// One user alone on the server.
    pub solo: UserRun,
    /// All users at once.
    pub users: Vec<UserRun>,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} users, {} files ({:.1} MB), per_object_delay_ms={}, bandwidth_cap={} B/s",
            self.n_users,
            self.file_count,
            self.total_bytes as f64 / 1e6,
            self.latency.per_object_delay_ms,
            self.latency.bandwidth_cap
        )?;
        writeln!(f, "{:<6} {:>16} {:>14} {:>18} {:>20}", "user", "download (s)", "speed (MB/s)", "precompiled (s)", "precompiled (MB/s)")?;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, r: &UserRun| {
            writeln!(
                f,
                "{:<6} {:>16.2} {:>14.2} {:>18.2} {:>20.2}",
                name,
                r.download_time.as_secs_f64(),
                r.speed,
                r.precompiled_time.as_secs_f64(),
                r.precompiled_speed
            )
        };
        row(f, "solo", &self.solo)?;
        for r in &self.users {
            row(f, &(r.user + 1).to_string(), r)?;
        }
        Ok(())
    }
}

/// A gateway over an existing corpus, with one account per simulated user
/// and a precompiled archive of the bench query.
pub struct BenchEnv {
    gateway: RunningGateway,
    cert_path: PathBuf,
    work: PathBuf,
    pub file_count: u64,
    pub total_bytes: u64,
}

impl BenchEnv {
    /// `work` receives the staging area, the precompiled archive and the
    /// users' download directories.
    pub fn start(catalog_path: &Path, store_root: &Path, work: &Path, config: &BenchConfig) -> Result<Self, BenchError> {
        fs::create_dir_all(work).map_err(setup)?;
        let catalog = crate::snapshot::load_catalog(catalog_path).map_err(setup)?;
        let matched = catalog.list_matches(&config.query).map_err(setup)?;
        let file_count = matched.len() as u64;
        let total_bytes = matched.iter().map(|r| r.byte_size).sum();

        let plain = LocalDirStore::open(store_root, LatencyModel::default()).map_err(setup)?;
        let archive = work.join("precompiled.tar");
        build_precompiled(&catalog, &plain, &config.query, &archive).map_err(setup)?;

        let hash = PasswordHash::create(PASSWORD, 1000).to_string();
        let users = (0..config.n_users.max(1))
            .map(|u| UserEntry { username: format!("user{}", u + 1), password_hash: hash.clone() })
            .collect();
        let mut gw = GatewayConfig::new(catalog_path.into(), store_root.into(), work.join("staging"), users);
        gw.listen = ([127, 0, 0, 1], 0).into();
        gw.latency = config.latency;
        gw.partition = config.partition;
        gw.max_live_jobs = config.n_users.max(1) * 2;
        gw.precompiled =
            vec![PrecompiledEntry { id: PRECOMPILED_ID.into(), name: "bench query".into(), archive: archive.clone() }];
        let gateway = RunningGateway::start(&gw).map_err(setup)?;
        let cert_path = work.join("gateway-cert.pem");
        fs::write(&cert_path, gateway.cert_pem()).map_err(setup)?;
        Ok(BenchEnv { gateway, cert_path, work: work.into(), file_count, total_bytes })
    }

    pub fn client_config(&self, user: usize) -> ClientConfig {
        ClientConfig {
            server_url: self.gateway.url(),
            username: format!("user{}", user + 1),
            password: PASSWORD.into(),
            sample_path: self.work.join(format!("user{}", user + 1)).join("samples"),
            download_path: self.work.join(format!("user{}", user + 1)).join("downloads"),
            tls_trust: TlsTrust::Pem(self.cert_path.clone()),
            ..ClientConfig::default()
        }
    }

    pub fn gateway(&self) -> &RunningGateway {
        &self.gateway
    }

    fn fresh_dir(&self, user: usize, what: &str) -> PathBuf {
        let dir = self.work.join(format!("user{}", user + 1)).join(what);
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    fn on_demand(&self, user: usize, config: &BenchConfig) -> Result<(u64, u64, Duration), BenchError> {
        let client = Client::new(&self.client_config(user)).map_err(|source| BenchError::Client { user, source })?;
        let settings = LoopSettings { backoff: config.backoff, max_tries: config.max_tries };
        let dest = self.fresh_dir(user, "on-demand");
        let report =
            client.download(&config.query, &dest, settings).map_err(|source| BenchError::Client { user, source })?;
        if !report.parts_abandoned.is_empty() {
            return Err(BenchError::Incomplete {
                user,
                abandoned: report.parts_abandoned.len(),
                total: report.parts_total,
            });
        }
        Ok((report.files_written, report.bytes_written, report.wall_time))
    }

    fn precompiled(&self, user: usize) -> Result<Duration, BenchError> {
        let client = Client::new(&self.client_config(user)).map_err(|source| BenchError::Client { user, source })?;
        let dest = self.fresh_dir(user, "precompiled");
        let start = Instant::now();
        client.precompiled_get(PRECOMPILED_ID, &dest).map_err(|source| BenchError::Client { user, source })?;
        Ok(start.elapsed())
    }
}

/// Runs `job(user)` for every user at once and collects the results in
/// user order.
fn concurrently<T: Send + 'static>(
    env: &Arc<BenchEnv>,
    n: usize,
    timeout: Duration,
    job: impl Fn(&BenchEnv, usize) -> Result<T, BenchError> + Send + Sync + 'static,
) -> Result<Vec<T>, BenchError> {
    let job = Arc::new(job);
    let barrier = Arc::new(Barrier::new(n));
    let (tx, rx) = mpsc::channel();
    for user in 0..n {
        let (env, job, barrier, tx) = (env.clone(), job.clone(), barrier.clone(), tx.clone());
        std::thread::Builder::new()
            .name(format!("bench-user{}", user + 1))
            .spawn(move || {
                barrier.wait();
                let _ = tx.send((user, job(&env, user)));
            })
            .map_err(setup)?;
    }
    drop(tx);
    let deadline = Instant::now() + timeout;
    let mut results: Vec<Option<T>> = (0..n).map(|_| None).collect();
    for _ in 0..n {
        let left = deadline.saturating_duration_since(Instant::now());
        let (user, r) = rx.recv_timeout(left).map_err(|_| BenchError::HarnessTimeout(timeout))?;
        results[user] = Some(r?);
    }
    Ok(results.into_iter().map(|r| r.expect("every user reported")).collect())
}

/// Measures one user alone, then `n_users` users downloading the same
/// query at the same time, both on demand and precompiled.
pub fn run_parallel_user_bench(env: BenchEnv, config: &BenchConfig) -> Result<BenchReport, BenchError> {
    let env = Arc::new(env);
    let n = config.n_users.max(1);
    let solo = concurrently(&env, 1, config.timeout, {
        let config = config.clone();
        move |env, user| {
            let (files, bytes, t) = env.on_demand(user, &config)?;
            let p = env.precompiled(user)?;
            Ok(user_run(user, files, bytes, t, p))
        }
    })?
    .remove(0);
    let downloads = concurrently(&env, n, config.timeout, {
        let config = config.clone();
        move |env, user| env.on_demand(user, &config)
    })?;
    let precompiled = concurrently(&env, n, config.timeout, |env, user| env.precompiled(user))?;
    let users = downloads
        .into_iter()
        .zip(precompiled)
        .enumerate()
        .map(|(user, ((files, bytes, t), p))| user_run(user, files, bytes, t, p))
        .collect();
    Ok(BenchReport {
        latency: config.latency,
        n_users: n,
        file_count: env.file_count,
        total_bytes: env.total_bytes,
        solo,
        users,
    })
}

fn user_run(user: usize, files: u64, bytes: u64, t: Duration, p: Duration) -> UserRun {
    UserRun {
        user,
        files,
        bytes,
        download_time: t,
        speed: mb_per_s(bytes, t),
        precompiled_time: p,
        precompiled_speed: mb_per_s(bytes, p),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub files: u64,
    pub bytes: u64,
    #[serde(with = "secs")]
    pub time: Duration,
    /// MB/s.
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferComparison {
    pub latency: LatencyModel,
    pub small: Throughput,
    pub large: Throughput,
}

impl TransferComparison {
    /// How many times faster the large-file download ran.
    pub fn ratio(&self) -> f64 {
        self.large.speed / self.small.speed.max(1e-12)
    }
}

impl fmt::Display for TransferComparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "per_object_delay_ms={}, bandwidth_cap={} B/s",
            self.latency.per_object_delay_ms, self.latency.bandwidth_cap
        )?;
        writeln!(f, "{:<8} {:>8} {:>12} {:>10} {:>14}", "corpus", "files", "MB", "time (s)", "speed (MB/s)")?;
        for (name, t) in [("small", &self.small), ("large", &self.large)] {
            writeln!(
                f,
                "{:<8} {:>8} {:>12.2} {:>10.2} {:>14.2}",
                name,
                t.files,
                t.bytes as f64 / 1e6,
                t.time.as_secs_f64(),
                t.speed
            )?;
        }
        writeln!(f, "large/small speed ratio: {:.1}", self.ratio())
    }
}

/// Writes two corpora of equal total size into one store, labelled
/// `small-files` (`n_small` images) and `large-files` (`n_large`
/// images), and returns the catalog.
pub fn write_size_corpora(store: &dyn ObjectStore, n_small: u32, n_large: u32, total_bytes: u64, seed: u64) -> Result<Catalog, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let captured = Utc.with_ymd_and_hms(2021, 6, 1, 12, 0, 0).unwrap();
    for (label, count) in [("small-files", n_small), ("large-files", n_large)] {
        let width = 256u32;
        let height = png::height_for(total_bytes / u64::from(count.max(1)), width);
        for i in 0..count {
            let id = format!("{label}-{i:05}");
            let bytes = png::random_png(width, height, &mut rng);
            let key = BlobKey::new(format!("sizes/{label}/{id}.png")).map_err(setup)?;
            store.put(&key, &bytes).map_err(setup)?;
            records.push(ImageRecord {
                record_id: id,
                filetype: FileType::MultiplePlantImage,
                dataset_class: DatasetClass::EagliLab,
                blob_key: key,
                byte_size: bytes.len() as u64,
                camera_lens: "synthetic".into(),
                camera_pose: CameraPose { x: 0.0, y: 0.0, z: 1.0, pan: 0.0, tilt: 0.0 },
                capture_datetime: captured,
                institute_room: "bench".into(),
                width_px: width,
                height_px: height,
                tags: vec![],
                plant_id: None,
                label: Some(label.into()),
                scientific_name: None,
                planting_date: None,
                age_days: None,
                position_id: None,
                x_min: None,
                x_max: None,
                y_min: None,
                y_max: None,
            });
        }
    }
    let mut catalog = Catalog::new();
    catalog.ingest(records).map_err(setup)?;
    Ok(catalog)
}

/// Downloads `n_small` small files and then `n_large` large ones of the
/// same total size through a gateway with `latency`, one after the other.
pub fn run_transfer_comparison(
    work: &Path,
    n_small: u32,
    n_large: u32,
    total_bytes: u64,
    latency: LatencyModel,
    timeout: Duration,
) -> Result<TransferComparison, BenchError> {
    let store_root = work.join("size-blobs");
    let catalog_path = work.join("size-catalog.jsonl");
    let store = LocalDirStore::open(&store_root, LatencyModel::default()).map_err(setup)?;
    if store.is_empty().map_err(setup)? {
        let catalog = write_size_corpora(&store, n_small, n_large, total_bytes, 7)?;
        save_catalog(&catalog_path, &catalog).map_err(setup)?;
    }
    let mut measured = Vec::new();
    for label in ["small-files", "large-files"] {
        let query = Query { species: vec![label.into()], ..Query::default() };
        let mut config = BenchConfig::new(1, query, latency);
        config.timeout = timeout;
        let env = Arc::new(BenchEnv::start(&catalog_path, &store_root, &work.join(label), &config)?);
        let (files, bytes, time) =
            concurrently(&env, 1, timeout, move |env, user| env.on_demand(user, &config))?.remove(0);
        measured.push(Throughput { files, bytes, time, speed: mb_per_s(bytes, time) });
    }
    let large = measured.pop().expect("two runs");
    let small = measured.pop().expect("two runs");
    Ok(TransferComparison { latency, small, large })
}
