#![allow(dead_code)]

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use terrabyte::client::{Client, ClientConfig, TlsTrust};
use terrabyte::datagen::{generate_into, CorpusSpec, GeneratedCorpus};
use terrabyte::gateway::{AppState, GatewayConfig, PasswordHash, RunningGateway, UserEntry};
use terrabyte::objectstore::{LocalDirStore, ObjectStore, StoreError};
use terrabyte_core::{partition, BlobKey, ImageRecord, PartFile, PartitionPolicy, Query};

pub const USERS: [(&str, &str); 2] = [("alice", "alice-pw"), ("bob", "bob-pw")];

/// A small corpus that generates in milliseconds.
pub fn small_spec(seed: u64, originals: usize) -> CorpusSpec {
    CorpusSpec { seed, n_originals: originals, image_bytes: (20_000, 30_000), frame_width: 200, ..CorpusSpec::default() }
}

pub fn user_entries() -> &'static Vec<UserEntry> {
    static ENTRIES: OnceLock<Vec<UserEntry>> = OnceLock::new();
    ENTRIES.get_or_init(|| {
        USERS
            .iter()
            .map(|(u, p)| UserEntry { username: (*u).into(), password_hash: PasswordHash::create(p, 1000).to_string() })
            .collect()
    })
}

/// A generated corpus served by a gateway on an ephemeral port.
pub struct Portal {
    pub dir: tempfile::TempDir,
    pub corpus: GeneratedCorpus,
    pub config: GatewayConfig,
    pub gateway: RunningGateway,
    pub cert_path: PathBuf,
}

impl Portal {
    pub fn start(spec: &CorpusSpec, tweak: impl FnOnce(&mut GatewayConfig, &Path)) -> Portal {
        Self::start_with_store(spec, tweak, |_, store| store)
    }

    /// Like [`Portal::start`], letting `wrap` replace the object store the
    /// gateway reads from.
    pub fn start_with_store(
        spec: &CorpusSpec,
        tweak: impl FnOnce(&mut GatewayConfig, &Path),
        wrap: impl FnOnce(&GeneratedCorpus, Arc<dyn ObjectStore>) -> Arc<dyn ObjectStore>,
    ) -> Portal {
        let dir = tempfile::tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");
        fs::create_dir_all(&corpus_dir).unwrap();
        let corpus = generate_into(spec, &corpus_dir).unwrap();
        let mut config = GatewayConfig::new(
            corpus.catalog_path.clone(),
            corpus.store_root.clone(),
            dir.path().join("staging"),
            user_entries().clone(),
        );
        config.listen = ([127, 0, 0, 1], 0).into();
        tweak(&mut config, dir.path());
        let store: Arc<dyn ObjectStore> = Arc::new(LocalDirStore::open(&config.store_root, config.latency).unwrap());
        let store = wrap(&corpus, store);
        let state = AppState::with_parts(&config, Arc::new(corpus.catalog.clone()), store).unwrap();
        let gateway = RunningGateway::start_with(state, config.listen, &config.tls).unwrap();
        let cert_path = dir.path().join("cert.pem");
        fs::write(&cert_path, gateway.cert_pem()).unwrap();
        Portal { dir, corpus, config, gateway, cert_path }
    }

    pub fn client_config(&self, user: &str, password: &str) -> ClientConfig {
        ClientConfig {
            server_url: self.gateway.url(),
            username: user.into(),
            password: password.into(),
            sample_path: self.dir.path().join(user).join("samples"),
            download_path: self.dir.path().join(user).join("downloads"),
            tls_trust: TlsTrust::Pem(self.cert_path.clone()),
            ..ClientConfig::default()
        }
    }

    pub fn client(&self, user: &str) -> Client {
        let pw = USERS.iter().find(|(u, _)| *u == user).map(|(_, p)| *p).unwrap_or("nope");
        Client::new(&self.client_config(user, pw)).unwrap()
    }

    /// Raw HTTPS client that trusts the gateway certificate.
    pub fn http(&self) -> reqwest::blocking::Client {
        let cert = reqwest::Certificate::from_pem(self.gateway.cert_pem().as_bytes()).unwrap();
        reqwest::blocking::Client::builder().tls_certs_only([cert]).build().unwrap()
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}/api/v1{path}", self.gateway.url())
    }

    /// Number of manifest records matching `q`, by linear scan.
    pub fn oracle_count(&self, q: &Query) -> usize {
        self.corpus.manifest.records().filter(|r| oracle_match(q, r)).count()
    }

    pub fn fresh_dir(&self, name: &str) -> PathBuf {
        let p = self.dir.path().join(name);
        let _ = fs::remove_dir_all(&p);
        fs::create_dir_all(&p).unwrap();
        p
    }
}

/// Every regular file under `dir` (recursively), with its sha-256.
pub fn hashed_files(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let entry = entry.unwrap();
            let path = entry.path();
            if entry.file_type().unwrap().is_dir() {
                stack.push(path);
            } else {
                let name = path.file_name().unwrap().to_string_lossy().into_owned();
                out.push((name, terrabyte::archive::sha256_hex(&fs::read(&path).unwrap())));
            }
        }
    }
    out.sort();
    out
}

/// The filter rules read literally, independent of `Query::matches`.
pub fn oracle_match(q: &Query, r: &ImageRecord) -> bool {
    let day = r.capture_datetime.date_naive();
    let age_ok = match r.age_days {
        None => q.age_min.is_none() && q.age_max.is_none(),
        Some(a) => q.age_min.map_or(true, |m| a >= m) && q.age_max.map_or(true, |m| a <= m),
    };
    r.dataset_class == q.dataset_class
        && q.filetypes.iter().any(|f| *f == r.filetype)
        && (q.species.is_empty() || r.label.as_ref().is_some_and(|l| q.species.iter().any(|s| s == l)))
        && age_ok
        && q.date_min.map_or(true, |m| day >= m)
        && q.date_max.map_or(true, |m| day <= m)
        && q.plant_id.as_ref().map_or(true, |p| r.plant_id.as_ref() == Some(p))
}

/// `(archive name, sha-256)` of every manifest file matching `q`, sorted.
pub fn expected_files(corpus: &GeneratedCorpus, q: &Query) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = corpus
        .manifest
        .files
        .iter()
        .filter(|f| oracle_match(q, &f.record))
        .map(|f| (f.record.archive_name(), f.content_hash.clone()))
        .collect();
    out.sort();
    out
}

/// Blob keys that land in part `k` of a job for `q`.
pub fn part_keys(corpus: &GeneratedCorpus, policy: &PartitionPolicy, q: &Query, k: usize) -> HashSet<BlobKey> {
    let files: Vec<PartFile> = corpus.catalog.list_matches(q).unwrap().into_iter().map(PartFile::from).collect();
    partition(files, policy).swap_remove(k).into_iter().map(|f| f.blob_key).collect()
}

/// Reads through to `inner` except for `fail`, which look missing.
pub struct FailingStore {
    pub inner: Arc<dyn ObjectStore>,
    pub fail: HashSet<BlobKey>,
}

impl ObjectStore for FailingStore {
    fn put(&self, key: &BlobKey, bytes: &[u8]) -> Result<(), StoreError> {
        self.inner.put(key, bytes)
    }

    fn get(&self, key: &BlobKey) -> Result<Vec<u8>, StoreError> {
        if self.fail.contains(key) {
            return Err(StoreError::NotFound(key.clone()));
        }
        self.inner.get(key)
    }

    fn contains(&self, key: &BlobKey) -> bool {
        !self.fail.contains(key) && self.inner.contains(key)
    }

    fn is_empty(&self) -> Result<bool, StoreError> {
        self.inner.is_empty()
    }
}
