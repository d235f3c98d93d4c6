//! Flat POSIX pax archives of portal files.
//!
//! Each file is written as a pax extended header carrying its SHA-256
//! followed by a plain ustar entry, so any tar reader can unpack it while
//! the portal's own extractor can verify content on the way out. Entry
//! names are bare file names; there is no directory nesting.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

/// Pax record key carrying the hex SHA-256 of the entry's content.
pub const HASH_PAX_KEY: &str = "TERRABYTE.sha256";

const BLOCK: u64 = 512;

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

fn pad(len: u64) -> u64 {
    len.div_ceil(BLOCK) * BLOCK
}

/// Encodes one `"<len> <key>=<value>\n"` pax record, where `<len>` counts
/// the whole record including itself.
fn pax_record(key: &str, value: &str) -> Vec<u8> {
    let body = key.len() + value.len() + 3;
    let mut len = body + 1;
    while len != body + len.to_string().len() {
        len = body + len.to_string().len();
    }
    format!("{len} {key}={value}\n").into_bytes()
}

fn hash_record_len() -> u64 {
    pax_record(HASH_PAX_KEY, &"0".repeat(64)).len() as u64
}

/// Exact size of the archive [`ArchiveWriter`] produces for entries of the
/// given content sizes.
pub fn predicted_size<I: IntoIterator<Item = u64>>(entry_sizes: I) -> u64 {
    let per_entry_overhead = BLOCK + pad(hash_record_len()) + BLOCK;
    entry_sizes.into_iter().map(|s| per_entry_overhead + pad(s)).sum::<u64>() + 2 * BLOCK
}

/// Whether `name` is acceptable as a flat archive entry name.
pub fn is_plain_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 100
        && !name.starts_with('.')
        && !name.contains(['/', '\\', '\0'])
}

pub struct ArchiveWriter<W: Write> {
    builder: tar::Builder<W>,
}

impl<W: Write> ArchiveWriter<W> {
    pub fn new(inner: W) -> Self {
        ArchiveWriter { builder: tar::Builder::new(inner) }
    }

    pub fn append(&mut self, name: &str, data: &[u8]) -> io::Result<()> {
        if !is_plain_name(name) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("bad entry name {name:?}")));
        }
        let record = pax_record(HASH_PAX_KEY, &sha256_hex(data));
        let mut pax = tar::Header::new_ustar();
        pax.set_entry_type(tar::EntryType::XHeader);
        pax.set_path(format!("PaxHeaders/{}", &name[..name.len().min(89)]))?;
        pax.set_size(record.len() as u64);
        pax.set_mode(0o644);
        pax.set_mtime(0);
        pax.set_cksum();
        self.builder.append(&pax, record.as_slice())?;

        let mut header = tar::Header::new_ustar();
        header.set_entry_type(tar::EntryType::Regular);
        header.set_path(name)?;
        header.set_size(data.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_cksum();
        self.builder.append(&header, data)
    }

    pub fn finish(self) -> io::Result<W> {
        self.builder.into_inner()
    }
}

/// Builds a complete archive in memory.
pub fn build_archive<'a, I>(entries: I) -> io::Result<Vec<u8>>
where
    I: IntoIterator<Item = (&'a str, &'a [u8])>,
{
    let mut w = ArchiveWriter::new(Vec::new());
    for (name, data) in entries {
        w.append(name, data)?;
    }
    w.finish()
}

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("archive read failed: {0}")]
    Read(#[source] io::Error),
    #[error("writing {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("corrupt archive: {0}")]
    Corrupt(String),
    #[error("content hash mismatch for {0}")]
    HashMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedFile {
    pub name: String,
    pub path: PathBuf,
    pub size: u64,
    pub sha256: String,
}

fn entry_hash<R: Read>(entry: &mut tar::Entry<'_, R>) -> io::Result<Option<String>> {
    let Some(exts) = entry.pax_extensions()? else { return Ok(None) };
    for ext in exts {
        let ext = ext?;
        if ext.key().ok() == Some(HASH_PAX_KEY) {
            return Ok(ext.value().ok().map(str::to_owned));
        }
    }
    Ok(None)
}

struct HashingWriter<W> {
    inner: W,
    hasher: Sha256,
    written: u64,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.written += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Unpacks every regular entry into `dest` (which must exist), checking
/// names and, where recorded, content hashes. Files are created fresh;
/// an existing file of the same name is an error.
pub fn extract_verified<R: Read>(reader: R, dest: &Path) -> Result<Vec<ExtractedFile>, ExtractError> {
    let mut archive = tar::Archive::new(reader);
    let mut out = Vec::new();
    for entry in archive.entries().map_err(ExtractError::Read)? {
        let mut entry = entry.map_err(ExtractError::Read)?;
        if entry.header().entry_type() != tar::EntryType::Regular {
            return Err(ExtractError::Corrupt(format!("unexpected entry type {:?}", entry.header().entry_type())));
        }
        let name = entry
            .path()
            .map_err(ExtractError::Read)?
            .to_str()
            .map(str::to_owned)
            .filter(|n| is_plain_name(n))
            .ok_or_else(|| ExtractError::Corrupt("entry name is not a plain file name".into()))?;
        let expected = entry_hash(&mut entry).map_err(ExtractError::Read)?;
        let declared = entry.header().size().map_err(ExtractError::Read)?;

        let path = dest.join(&name);
        let write_err = |source| ExtractError::Write { path: path.clone(), source };
        let file = fs::OpenOptions::new().write(true).create_new(true).open(&path).map_err(write_err)?;
        let mut sink = HashingWriter { inner: io::BufWriter::new(file), hasher: Sha256::new(), written: 0 };
        io::copy(&mut entry, &mut sink).map_err(ExtractError::Read)?;
        sink.flush().map_err(write_err)?;
        let sha256 = hex::encode(sink.hasher.finalize());
        if sink.written != declared {
            return Err(ExtractError::Corrupt(format!("{name}: short entry")));
        }
        if expected.is_some_and(|h| h != sha256) {
            return Err(ExtractError::HashMismatch(name));
        }
        out.push(ExtractedFile { name, path, size: sink.written, sha256 });
    }
    Ok(out)
}

/// Reads all entries into memory as `(name, content)` pairs.
pub fn read_archive<R: Read>(reader: R) -> io::Result<Vec<(String, Vec<u8>)>> {
    let mut archive = tar::Archive::new(reader);
    let mut out = Vec::new();
    for entry in archive.entries()? {
        let mut entry = entry?;
        if entry.header().entry_type() != tar::EntryType::Regular {
            continue;
        }
        let name = entry.path()?.to_string_lossy().into_owned();
        let mut data = Vec::new();
        entry.read_to_end(&mut data)?;
        out.push((name, data));
    }
    Ok(out)
}

/// Number of files in an archive on disk.
pub fn count_entries(path: &Path) -> io::Result<u64> {
    let mut archive = tar::Archive::new(io::BufReader::new(fs::File::open(path)?));
    let mut n = 0;
    for entry in archive.entries()? {
        if entry?.header().entry_type() == tar::EntryType::Regular {
            n += 1;
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pax_record_length_counts_itself() {
        let r = pax_record("k", "v");
        assert_eq!(r, b"6 k=v\n");
        let r = pax_record(HASH_PAX_KEY, &"a".repeat(64));
        let s = String::from_utf8(r.clone()).unwrap();
        assert_eq!(s.split(' ').next().unwrap().parse::<usize>().unwrap(), r.len());
        // lengths that cross a digit boundary
        let r = pax_record("k", &"x".repeat(94));
        assert_eq!(r.len(), 101);
        assert!(r.starts_with(b"101 "));
    }

    #[test]
    fn round_trip_with_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = build_archive([("a.png", &b"png-bytes"[..]), ("a.json", &b"{}"[..])]).unwrap();
        assert_eq!(bytes.len() as u64, predicted_size([9, 2]));
        let files = extract_verified(bytes.as_slice(), dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert_eq!(fs::read(dir.path().join("a.png")).unwrap(), b"png-bytes");
        assert_eq!(files[0].sha256, sha256_hex(b"png-bytes"));
        assert_eq!(read_archive(bytes.as_slice()).unwrap()[1], ("a.json".to_string(), b"{}".to_vec()));
    }

    #[test]
    fn tampered_content_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = build_archive([("a.png", &b"original"[..])]).unwrap();
        let pos = bytes.windows(8).position(|w| w == b"original").unwrap();
        bytes[pos] = b'O';
        match extract_verified(bytes.as_slice(), dir.path()) {
            Err(ExtractError::HashMismatch(name)) => assert_eq!(name, "a.png"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_archive_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = build_archive([("a.png", &[5u8; 3000][..])]).unwrap();
        assert!(extract_verified(&bytes[..1800], dir.path()).is_err());
    }

    #[test]
    fn rejects_nested_names() {
        assert!(build_archive([("../evil", &b""[..])]).is_err());
        assert!(build_archive([("a/b", &b""[..])]).is_err());
    }

    proptest! {
        #[test]
        fn predicted_size_is_exact(sizes in proptest::collection::vec(0usize..3000, 0..12)) {
            let blobs: Vec<(String, Vec<u8>)> = sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| (format!("f{i}.png"), vec![i as u8; n]))
                .collect();
            let bytes = build_archive(blobs.iter().map(|(n, d)| (n.as_str(), d.as_slice()))).unwrap();
            prop_assert_eq!(bytes.len() as u64, predicted_size(sizes.iter().map(|&s| s as u64)));
            prop_assert_eq!(read_archive(bytes.as_slice()).unwrap(), blobs);
        }
    }
}
