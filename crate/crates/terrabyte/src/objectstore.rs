//! Blob storage standing in for an S3-compatible object store.
//!
//! The only shipped backend keeps one file per key under a root directory.
//! An optional [`LatencyModel`] makes every read pay a fixed per-object
//! start-up cost plus transfer time over a bandwidth-capped link that all
//! concurrent readers share.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use terrabyte_core::record::InvalidBlobKey;
use terrabyte_core::BlobKey;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("blob {0} not found")]
    NotFound(BlobKey),
    #[error("blob {0} already exists")]
    KeyExists(BlobKey),
    #[error(transparent)]
    InvalidKey(#[from] InvalidBlobKey),
    #[error("storage unavailable for {key}: {source}")]
    Io { key: String, source: io::Error },
}

/// Simulated transfer cost of a read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    /// Fixed start-up cost charged once per object read.
    #[serde(default)]
    pub per_object_delay_ms: u64,
    /// Link capacity in bytes per second shared by all readers; 0 is
    /// uncapped.
    #[serde(default)]
    pub bandwidth_cap: u64,
}

impl LatencyModel {
    pub fn is_enabled(&self) -> bool {
        self.per_object_delay_ms > 0 || self.bandwidth_cap > 0
    }

    /// Lower bound on the time to read one object of `bytes` bytes with the
    /// link otherwise idle.
    pub fn min_fetch_time(&self, bytes: u64) -> Duration {
        Duration::from_millis(self.per_object_delay_ms) + self.transfer_time(bytes)
    }

    fn transfer_time(&self, bytes: u64) -> Duration {
        if self.bandwidth_cap == 0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(bytes as f64 / self.bandwidth_cap as f64)
        }
    }
}

pub trait ObjectStore: Send + Sync {
    fn put(&self, key: &BlobKey, bytes: &[u8]) -> Result<(), StoreError>;

    fn get(&self, key: &BlobKey) -> Result<Vec<u8>, StoreError>;

    fn contains(&self, key: &BlobKey) -> bool;

    /// True when nothing has been stored yet.
    fn is_empty(&self) -> Result<bool, StoreError>;

    /// Fetches every key in order. Fails without a partial result on the
    /// first missing key.
    fn get_many(&self, keys: &[BlobKey]) -> Result<Vec<Vec<u8>>, StoreError> {
        if let Some(missing) = keys.iter().find(|k| !self.contains(k)) {
            return Err(StoreError::NotFound(missing.clone()));
        }
        keys.iter().map(|k| self.get(k)).collect()
    }
}

pub struct LocalDirStore {
    root: PathBuf,
    latency: LatencyModel,
    /// Instant at which the shared link becomes idle.
    link_free_at: Mutex<Instant>,
}

impl LocalDirStore {
    pub fn open(root: impl Into<PathBuf>, latency: LatencyModel) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(LocalDirStore { root, latency, link_free_at: Mutex::new(Instant::now()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn latency(&self) -> LatencyModel {
        self.latency
    }

    pub fn path_for(&self, key: &BlobKey) -> PathBuf {
        let mut p = self.root.clone();
        p.extend(key.segments());
        p
    }

    /// Sum of stored blob sizes.
    pub fn total_bytes(&self) -> io::Result<u64> {
        fn walk(dir: &Path) -> io::Result<u64> {
            let mut total = 0;
            for entry in fs::read_dir(dir)? {
                let entry = entry?;
                let meta = entry.metadata()?;
                total += if meta.is_dir() { walk(&entry.path())? } else { meta.len() };
            }
            Ok(total)
        }
        walk(&self.root)
    }

    fn simulate_transfer(&self, bytes: u64) {
        if self.latency.per_object_delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.latency.per_object_delay_ms));
        }
        let transfer = self.latency.transfer_time(bytes);
        if transfer.is_zero() {
            return;
        }
        let done_at = {
            let mut free = self.link_free_at.lock().unwrap();
            let start = (*free).max(Instant::now());
            *free = start + transfer;
            *free
        };
        let now = Instant::now();
        if done_at > now {
            std::thread::sleep(done_at - now);
        }
    }
}

impl ObjectStore for LocalDirStore {
    fn put(&self, key: &BlobKey, bytes: &[u8]) -> Result<(), StoreError> {
        let path = self.path_for(key);
        let io_err = |source| StoreError::Io { key: key.to_string(), source };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut file = match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                return Err(StoreError::KeyExists(key.clone()))
            }
            Err(e) => return Err(io_err(e)),
        };
        file.write_all(bytes).map_err(io_err)
    }

    fn get(&self, key: &BlobKey) -> Result<Vec<u8>, StoreError> {
        let bytes = match fs::read(self.path_for(key)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::NotFound(key.clone())),
            Err(source) => return Err(StoreError::Io { key: key.to_string(), source }),
        };
        self.simulate_transfer(bytes.len() as u64);
        Ok(bytes)
    }

    fn contains(&self, key: &BlobKey) -> bool {
        self.path_for(key).is_file()
    }

    fn is_empty(&self) -> Result<bool, StoreError> {
        let mut entries = fs::read_dir(&self.root)
            .map_err(|source| StoreError::Io { key: self.root.display().to_string(), source })?;
        Ok(entries.next().is_none())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::sha256_hex;

    fn key(s: &str) -> BlobKey {
        BlobKey::new(s).unwrap()
    }

    fn store(latency: LatencyModel) -> (tempfile::TempDir, LocalDirStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = LocalDirStore::open(dir.path().join("blobs"), latency).unwrap();
        (dir, s)
    }

    #[test]
    fn put_get_round_trip() {
        let (_d, s) = store(LatencyModel::default());
        assert!(s.is_empty().unwrap());
        s.put(&key("a/b.png"), &[1, 2, 3]).unwrap();
        assert!(!s.is_empty().unwrap());
        assert_eq!(s.get(&key("a/b.png")).unwrap(), [1, 2, 3]);
        assert!(s.path_for(&key("a/b.png")).ends_with("a/b.png"));
    }

    #[test]
    fn overwrite_rejected() {
        let (_d, s) = store(LatencyModel::default());
        s.put(&key("x"), b"one").unwrap();
        assert!(matches!(s.put(&key("x"), b"two"), Err(StoreError::KeyExists(_))));
        assert_eq!(s.get(&key("x")).unwrap(), b"one");
    }

    #[test]
    fn missing_keys() {
        let (_d, s) = store(LatencyModel::default());
        assert!(matches!(s.get(&key("nope")), Err(StoreError::NotFound(_))));
        s.put(&key("k1"), b"1").unwrap();
        match s.get_many(&[key("k1"), key("k2"), key("k3")]) {
            Err(StoreError::NotFound(k)) => assert_eq!(k.as_str(), "k2"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(s.get_many(&[]).unwrap().is_empty());
    }

    #[test]
    fn get_many_is_composition_of_get() {
        let (_d, s) = store(LatencyModel::default());
        s.put(&key("k1"), b"first").unwrap();
        s.put(&key("k2"), b"second").unwrap();
        let many = s.get_many(&[key("k2"), key("k1")]).unwrap();
        assert_eq!(many, vec![s.get(&key("k2")).unwrap(), s.get(&key("k1")).unwrap()]);
    }

    #[test]
    fn many_blobs_keep_bytes_and_hashes() {
        let (_d, s) = store(LatencyModel::default());
        let mut expected_total = 0u64;
        let mut hashes = Vec::new();
        for i in 0..10_000u32 {
            let data: Vec<u8> = (0..(i % 97)).map(|j| (i ^ j) as u8).collect();
            expected_total += data.len() as u64;
            let k = key(&format!("bulk/{:02}/{i}", i % 50));
            s.put(&k, &data).unwrap();
            hashes.push((k, sha256_hex(&data)));
        }
        assert_eq!(s.total_bytes().unwrap(), expected_total);
        for (k, h) in hashes.iter().step_by(37) {
            assert_eq!(&sha256_hex(&s.get(k).unwrap()), h);
        }
    }

    #[test]
    fn per_object_delay_is_charged_per_get() {
        let (_d, s) = store(LatencyModel { per_object_delay_ms: 20, bandwidth_cap: 0 });
        let keys: Vec<BlobKey> = (0..100).map(|i| key(&format!("d/{i}"))).collect();
        for k in &keys {
            s.put(k, b"tiny").unwrap();
        }
        let t = Instant::now();
        for k in &keys {
            s.get(k).unwrap();
        }
        assert!(t.elapsed() >= Duration::from_secs(2), "{:?}", t.elapsed());
    }

    #[test]
    fn small_objects_are_slower_than_large_ones_of_equal_total() {
        let latency = LatencyModel { per_object_delay_ms: 2, bandwidth_cap: 200 * 1024 * 1024 };
        let (_d, s) = store(latency);
        let small: Vec<BlobKey> = (0..1000).map(|i| key(&format!("s/{i}"))).collect();
        let large: Vec<BlobKey> = (0..10).map(|i| key(&format!("l/{i}"))).collect();
        for k in &small {
            s.put(k, &[7u8; 1000]).unwrap();
        }
        for k in &large {
            s.put(k, &[7u8; 100_000]).unwrap();
        }
        let t = Instant::now();
        s.get_many(&small).unwrap();
        let small_time = t.elapsed();
        let t = Instant::now();
        s.get_many(&large).unwrap();
        let large_time = t.elapsed();
        assert!(small_time > large_time, "{small_time:?} vs {large_time:?}");
    }

    #[test]
    fn bandwidth_cap_is_shared_between_readers() {
        // 4 readers x 100 KB over a 1 MB/s link need at least 0.4 s in total
        let latency = LatencyModel { per_object_delay_ms: 0, bandwidth_cap: 1_000_000 };
        let (_d, s) = store(latency);
        for i in 0..4 {
            s.put(&key(&format!("b/{i}")), &vec![0u8; 100_000]).unwrap();
        }
        assert!(latency.min_fetch_time(100_000) >= Duration::from_millis(100));
        let t = Instant::now();
        std::thread::scope(|scope| {
            for i in 0..4 {
                let s = &s;
                scope.spawn(move || s.get(&key(&format!("b/{i}"))).unwrap());
            }
        });
        assert!(t.elapsed() >= Duration::from_millis(400), "{:?}", t.elapsed());
    }
}
