//! Catalog snapshot files: one JSON `ImageRecord` per line.

use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;

use terrabyte_core::{Catalog, CatalogError, ImageRecord};

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

pub fn write_records<'a, I>(path: &Path, records: I) -> io::Result<()>
where
    I: IntoIterator<Item = &'a ImageRecord>,
{
    let tmp = path.with_extension("jsonl.tmp");
    let mut w = BufWriter::new(fs::File::create(&tmp)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    fs::rename(tmp, path)
}

pub fn read_records(path: &Path) -> Result<Vec<ImageRecord>, SnapshotError> {
    let reader = io::BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| SnapshotError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn load_catalog(path: &Path) -> Result<Catalog, SnapshotError> {
    let mut catalog = Catalog::new();
    catalog.ingest(read_records(path)?)?;
    Ok(catalog)
}

pub fn save_catalog(path: &Path, catalog: &Catalog) -> io::Result<()> {
    write_records(path, catalog.records())
}
