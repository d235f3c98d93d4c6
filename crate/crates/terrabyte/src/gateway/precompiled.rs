//! Pre-built dataset archives kept permanently on the server.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use terrabyte_core::record::is_valid_identifier;
use terrabyte_core::{Catalog, CatalogError, Query};

use super::config::PrecompiledEntry;
use crate::archive::{count_entries, ArchiveWriter};
use crate::objectstore::{ObjectStore, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecompiledInfo {
    pub id: String,
    pub name: String,
    pub file_count: u64,
    pub bytes: u64,
}

#[derive(Debug, Default)]
pub struct PrecompiledRegistry {
    entries: BTreeMap<String, (PrecompiledInfo, PathBuf)>,
}

impl PrecompiledRegistry {
    /// Registers every entry, reading each archive once to count files.
    pub fn load(entries: &[PrecompiledEntry]) -> io::Result<Self> {
        let mut map = BTreeMap::new();
        for e in entries {
            if !is_valid_identifier(&e.id) {
                return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("bad precompiled id {:?}", e.id)));
            }
            let bytes = fs::metadata(&e.archive)
                .map_err(|err| io::Error::new(err.kind(), format!("{}: {err}", e.archive.display())))?
                .len();
            let file_count = count_entries(&e.archive)?;
            let info = PrecompiledInfo { id: e.id.clone(), name: e.name.clone(), file_count, bytes };
            if map.insert(e.id.clone(), (info, e.archive.clone())).is_some() {
                return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("duplicate precompiled id {:?}", e.id)));
            }
        }
        Ok(PrecompiledRegistry { entries: map })
    }

    pub fn list(&self) -> Vec<PrecompiledInfo> {
        self.entries.values().map(|(info, _)| info.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<(&PrecompiledInfo, &Path)> {
        self.entries.get(id).map(|(info, path)| (info, path.as_path()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error(transparent)]
    Query(#[from] CatalogError),
    #[error("the query matched no files")]
    Empty,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Writes an archive of every file matching `q` to `out`. Returns the
/// number of files written.
pub fn build_precompiled(catalog: &Catalog, store: &dyn ObjectStore, q: &Query, out: &Path) -> Result<u64, BuildError> {
    let records = catalog.list_matches(q)?;
    if records.is_empty() {
        return Err(BuildError::Empty);
    }
    let partial = out.with_extension("partial");
    let result = (|| {
        let mut w = ArchiveWriter::new(BufWriter::new(fs::File::create(&partial)?));
        for r in &records {
            w.append(&r.archive_name(), &store.get(&r.blob_key)?)?;
        }
        w.finish()?.flush()?;
        fs::rename(&partial, out)?;
        Ok::<_, BuildError>(records.len() as u64)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&partial);
    }
    result
}
