//! Synthetic lab corpus: original frames with several plants each, their
//! annotated copies, the single-plant crops, and a metadata document for
//! every image. Also the load harness used to compare download modes.

pub mod bench;
pub mod png;

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{Duration as Days, NaiveDate, NaiveTime, TimeZone, Utc};
use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use terrabyte_core::{BlobKey, CameraPose, Catalog, CatalogError, DatasetClass, FileType, ImageRecord};

use crate::archive::sha256_hex;
use crate::objectstore::{LocalDirStore, ObjectStore, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Species {
    pub label: String,
    pub scientific_name: String,
}

impl Species {
    pub fn new(label: &str, scientific_name: &str) -> Self {
        Species { label: label.into(), scientific_name: scientific_name.into() }
    }
}

/// Everything that determines a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_originals: usize,
    /// Inclusive range of plants visible in one original frame.
    pub plants_per_original: (u32, u32),
    pub species_pool: Vec<Species>,
    /// Inclusive range for planting dates. Captures follow 1 to 60 days
    /// later.
    pub date_range: (NaiveDate, NaiveDate),
    /// Inclusive size range of an original frame's PNG, in bytes.
    pub image_bytes: (u64, u64),
    /// Width of every original frame.
    pub frame_width: u32,
    /// Extra field-class frames, without plant metadata.
    #[serde(default)]
    pub field_originals: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 42,
            n_originals: 300,
            plants_per_original: (1, 5),
            species_pool: vec![
                Species::new("Soybean", "Glycine max"),
                Species::new("Fallopia convolvulus", "Fallopia convolvulus"),
                Species::new("Canola", "Brassica napus"),
                Species::new("Wheat", "Triticum aestivum"),
                Species::new("Barley", "Hordeum vulgare"),
                Species::new("Wild oat", "Avena fatua"),
            ],
            date_range: (
                NaiveDate::from_ymd_opt(2021, 1, 4).unwrap(),
                NaiveDate::from_ymd_opt(2021, 10, 29).unwrap(),
            ),
            image_bytes: (350_000, 450_000),
            frame_width: 640,
            field_originals: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::InvalidSpec(m.into()));
        let (lo, hi) = self.plants_per_original;
        if lo == 0 || lo > hi {
            return bad("plants_per_original must be a non-empty range starting at 1 or more");
        }
        if self.species_pool.is_empty() {
            return bad("species_pool is empty");
        }
        if self.date_range.0 > self.date_range.1 {
            return bad("date_range is reversed");
        }
        if self.image_bytes.0 > self.image_bytes.1 {
            return bad("image_bytes is reversed");
        }
        if self.frame_width < 6 || self.image_bytes.0 < 6 * u64::from(self.frame_width) {
            return bad("frames must be at least 6x6 pixels");
        }
        if self.n_originals > 99_999 || self.field_originals > 99_999 {
            return bad("at most 99999 originals per class");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("target store or catalog is not empty")]
    NonEmptyTarget,
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("manifest line {line}: {source}")]
    ManifestParse { line: usize, source: serde_json::Error },
}

/// One stored file of the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub record_id: String,
    pub blob_key: BlobKey,
    pub byte_size: u64,
    pub content_hash: String,
    pub record: ImageRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestLine {
    File(ManifestFile),
    Original { record_id: String, plants: u32 },
}

/// Ground truth for a generated corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub files: Vec<ManifestFile>,
    /// Plants drawn for each lab original, by original record id.
    pub plants: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Drift {
    Missing(BlobKey),
    SizeChanged { key: BlobKey, expected: u64, actual: u64 },
    HashChanged(BlobKey),
}

impl Manifest {
    pub fn total_bytes(&self) -> u64 {
        self.files.iter().map(|f| f.byte_size).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.files.iter().map(|f| &f.record)
    }

    pub fn count(&self, filetype: FileType) -> usize {
        self.files.iter().filter(|f| f.record.filetype == filetype).count()
    }

    pub fn write_jsonl(&self, path: &Path) -> io::Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for (id, &plants) in &self.plants {
            let line = ManifestLine::Original { record_id: id.clone(), plants };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        for f in &self.files {
            serde_json::to_writer(&mut out, &ManifestLine::File(f.clone()))?;
            out.write_all(b"\n")?;
        }
        out.into_inner().map_err(|e| e.into_error())?.sync_all()
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, DatagenError> {
        let reader = io::BufReader::new(fs::File::open(path)?);
        let mut manifest = Manifest::default();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line).map_err(|source| DatagenError::ManifestParse { line: n + 1, source })? {
                ManifestLine::File(f) => manifest.files.push(f),
                ManifestLine::Original { record_id, plants } => {
                    manifest.plants.insert(record_id, plants);
                }
            }
        }
        Ok(manifest)
    }

    /// Recomputes every blob's hash from `store` and lists the differences.
    pub fn verify(&self, store: &dyn ObjectStore) -> Vec<Drift> {
        let mut drift = Vec::new();
        for f in &self.files {
            match store.get(&f.blob_key) {
                Err(_) => drift.push(Drift::Missing(f.blob_key.clone())),
                Ok(bytes) if bytes.len() as u64 != f.byte_size => drift.push(Drift::SizeChanged {
                    key: f.blob_key.clone(),
                    expected: f.byte_size,
                    actual: bytes.len() as u64,
                }),
                Ok(bytes) if sha256_hex(&bytes) != f.content_hash => drift.push(Drift::HashChanged(f.blob_key.clone())),
                Ok(_) => {}
            }
        }
        drift
    }
}

/// A group of plants sown together; every frame of a tray shows a subset
/// of its plants.
struct Tray {
    species: usize,
    planted: NaiveDate,
    room: u32,
}

struct Frame {
    width: u32,
    pixels: Vec<u8>,
}

impl Frame {
    fn random(width: u32, height: u32, rng: &mut impl RngCore) -> Self {
        let mut pixels = vec![0u8; width as usize * height as usize];
        rng.fill_bytes(&mut pixels);
        Frame { width, pixels }
    }

    fn crop(&self, (x0, x1, y0, y1): (u32, u32, u32, u32)) -> Vec<u8> {
        let mut out = Vec::with_capacity(((x1 - x0) * (y1 - y0)) as usize);
        for y in y0..y1 {
            let row = (y * self.width) as usize;
            out.extend_from_slice(&self.pixels[row + x0 as usize..row + x1 as usize]);
        }
        out
    }

    fn outline(&mut self, (x0, x1, y0, y1): (u32, u32, u32, u32)) {
        let w = self.width as usize;
        for x in x0..x1 {
            self.pixels[y0 as usize * w + x as usize] = 255;
            self.pixels[(y1 - 1) as usize * w + x as usize] = 255;
        }
        for y in y0..y1 {
            self.pixels[y as usize * w + x0 as usize] = 255;
            self.pixels[y as usize * w + (x1 - 1) as usize] = 255;
        }
    }
}

struct Sink<'a> {
    store: &'a dyn ObjectStore,
    manifest: Manifest,
}

impl Sink<'_> {
    fn add(&mut self, mut record: ImageRecord, bytes: &[u8]) -> Result<ImageRecord, DatagenError> {
        record.byte_size = bytes.len() as u64;
        self.store.put(&record.blob_key, bytes)?;
        self.manifest.files.push(ManifestFile {
            record_id: record.record_id.clone(),
            blob_key: record.blob_key.clone(),
            byte_size: record.byte_size,
            content_hash: sha256_hex(bytes),
            record: record.clone(),
        });
        Ok(record)
    }

    /// Stores the metadata document describing `image`.
    fn add_metadata(&mut self, image: &ImageRecord, record_id: String, prefix: &str) -> Result<(), DatagenError> {
        let body = serde_json::to_vec_pretty(image).expect("records serialize");
        let meta = ImageRecord {
            record_id: record_id.clone(),
            filetype: FileType::MetadataJson,
            blob_key: key(prefix, image.capture_date(), &record_id, "json"),
            ..image.clone()
        };
        self.add(meta, &body).map(drop)
    }
}

fn key(prefix: &str, day: NaiveDate, id: &str, ext: &str) -> BlobKey {
    BlobKey::new(format!("{prefix}/{day}/{id}.{ext}")).expect("generated keys are well formed")
}

fn pose(rng: &mut impl Rng) -> CameraPose {
    CameraPose {
        x: (rng.random_range(0.0..2.0f64) * 1000.0).round() / 1000.0,
        y: (rng.random_range(0.0..1.0f64) * 1000.0).round() / 1000.0,
        z: (rng.random_range(0.8..1.2f64) * 1000.0).round() / 1000.0,
        pan: f64::from(rng.random_range(-30i32..=30)),
        tilt: f64::from(rng.random_range(-60i32..=0)),
    }
}

fn capture_time(day: NaiveDate, rng: &mut impl Rng) -> chrono::DateTime<Utc> {
    let t = NaiveTime::from_hms_opt(rng.random_range(8..18), rng.random_range(0..60), rng.random_range(0..60)).unwrap();
    Utc.from_utc_datetime(&day.and_time(t))
}

fn random_day(range: (NaiveDate, NaiveDate), rng: &mut impl Rng) -> NaiveDate {
    let span = (range.1 - range.0).num_days();
    range.0 + Days::days(rng.random_range(0..=span))
}

/// Writes the corpus described by `spec` into `store` and `catalog`, both
/// of which must start empty. The same spec always yields the same bytes.
pub fn generate(spec: &CorpusSpec, store: &dyn ObjectStore, catalog: &mut Catalog) -> Result<Manifest, DatagenError> {
    spec.validate()?;
    if !catalog.is_empty() || !store.is_empty()? {
        return Err(DatagenError::NonEmptyTarget);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (plants_lo, plants_hi) = spec.plants_per_original;
    let n_trays = spec.n_originals.div_ceil(6).max(1);
    let trays: Vec<Tray> = (0..n_trays)
        .map(|t| Tray {
            species: rng.random_range(0..spec.species_pool.len()),
            planted: random_day(spec.date_range, &mut rng),
            room: t as u32 % 3 + 1,
        })
        .collect();

    let mut sink = Sink { store, manifest: Manifest::default() };
    let width = spec.frame_width;
    for i in 0..spec.n_originals {
        let tray_no = i % n_trays;
        let tray = &trays[tray_no];
        let species = &spec.species_pool[tray.species];
        let age = rng.random_range(1..=60u32);
        let captured = capture_time(tray.planted + Days::days(i64::from(age)), &mut rng);
        let height = png::height_for(rng.random_range(spec.image_bytes.0..=spec.image_bytes.1), width);
        let mut frame = Frame::random(width, height, &mut rng);
        let k = rng.random_range(plants_lo..=plants_hi);
        let mut slots: Vec<usize> = sample(&mut rng, plants_hi as usize, k as usize).into_vec();
        slots.sort_unstable();

        let id = format!("eo{i:05}");
        let day = captured.date_naive();
        let original = ImageRecord {
            record_id: id.clone(),
            filetype: FileType::MultiplePlantImage,
            dataset_class: DatasetClass::EagliLab,
            blob_key: key("eagli", day, &id, "png"),
            byte_size: 0,
            camera_lens: "Canon EOS 5D Mark IV / 24-70mm".into(),
            camera_pose: pose(&mut rng),
            capture_datetime: captured,
            institute_room: format!("UWinnipeg growth chamber {}", tray.room),
            width_px: width,
            height_px: height,
            tags: vec![format!("tray-{tray_no:03}")],
            plant_id: None,
            label: Some(species.label.clone()),
            scientific_name: Some(species.scientific_name.clone()),
            planting_date: Some(tray.planted),
            age_days: Some(age),
            position_id: None,
            x_min: None,
            x_max: None,
            y_min: None,
            y_max: None,
        };

        let boxes: Vec<(u32, u32, u32, u32)> = slots
            .iter()
            .map(|_| {
                let cw = rng.random_range(width / 6..=width / 3);
                let ch = rng.random_range(height / 6..=height / 3);
                let x0 = rng.random_range(0..=width - cw);
                let y0 = rng.random_range(0..=height - ch);
                (x0, x0 + cw, y0, y0 + ch)
            })
            .collect();
        let crops: Vec<Vec<u8>> = boxes.iter().map(|&b| frame.crop(b)).collect();

        let original = sink.add(original, &png::encode_gray(width, height, &frame.pixels))?;
        sink.add_metadata(&original, format!("{id}-meta"), "eagli")?;
        for &b in &boxes {
            frame.outline(b);
        }
        let ann_id = format!("{id}-ann");
        let annotated = ImageRecord {
            record_id: ann_id.clone(),
            filetype: FileType::AnnotatedMultiplePlantImage,
            blob_key: key("eagli", day, &ann_id, "png"),
            ..original.clone()
        };
        sink.add(annotated, &png::encode_gray(width, height, &frame.pixels))?;

        for ((&slot, &(x0, x1, y0, y1)), pixels) in slots.iter().zip(&boxes).zip(&crops) {
            let crop_id = format!("{id}-p{}", slot + 1);
            let crop = ImageRecord {
                record_id: crop_id.clone(),
                filetype: FileType::SinglePlantImage,
                blob_key: key("eagli", day, &crop_id, "png"),
                tags: vec![],
                plant_id: Some(format!("tray{tray_no:03}-p{}", slot + 1)),
                position_id: Some(format!("tray{tray_no:03}-slot{}", slot + 1)),
                x_min: Some(x0),
                x_max: Some(x1),
                y_min: Some(y0),
                y_max: Some(y1),
                ..original.clone()
            };
            let crop = sink.add(crop, &png::encode_gray(x1 - x0, y1 - y0, pixels))?;
            sink.add_metadata(&crop, format!("{crop_id}-meta"), "eagli")?;
        }
        sink.manifest.plants.insert(id, k);
    }

    for i in 0..spec.field_originals {
        let id = format!("fd{i:05}");
        let day = random_day(spec.date_range, &mut rng);
        let captured = capture_time(day, &mut rng);
        let height = png::height_for(rng.random_range(spec.image_bytes.0..=spec.image_bytes.1), width);
        let frame = Frame::random(width, height, &mut rng);
        let record = ImageRecord {
            record_id: id.clone(),
            filetype: FileType::MultiplePlantImage,
            dataset_class: DatasetClass::Field,
            blob_key: key("field", day, &id, "png"),
            byte_size: 0,
            camera_lens: "DJI Zenmuse / 35mm".into(),
            camera_pose: pose(&mut rng),
            capture_datetime: captured,
            institute_room: "field plot".into(),
            width_px: width,
            height_px: height,
            tags: vec!["field".into()],
            plant_id: None,
            label: None,
            scientific_name: None,
            planting_date: None,
            age_days: None,
            position_id: None,
            x_min: None,
            x_max: None,
            y_min: None,
            y_max: None,
        };
        let record = sink.add(record, &png::encode_gray(width, height, &frame.pixels))?;
        sink.add_metadata(&record, format!("{id}-meta"), "field")?;
    }

    let manifest = sink.manifest;
    catalog.ingest(manifest.records().cloned().collect())?;
    Ok(manifest)
}

/// A corpus laid out on disk the way the gateway expects it.
#[derive(Debug)]
pub struct GeneratedCorpus {
    pub manifest: Manifest,
    pub catalog: Catalog,
    pub store_root: PathBuf,
    pub catalog_path: PathBuf,
    pub manifest_path: PathBuf,
}

/// Generates into `dir/blobs`, then writes `dir/catalog.jsonl` and
/// `dir/manifest.jsonl`.
pub fn generate_into(spec: &CorpusSpec, dir: &Path) -> Result<GeneratedCorpus, DatagenError> {
    let store_root = dir.join("blobs");
    let store = LocalDirStore::open(&store_root, Default::default())?;
    let mut catalog = Catalog::new();
    let manifest = generate(spec, &store, &mut catalog)?;
    let catalog_path = dir.join("catalog.jsonl");
    let manifest_path = dir.join("manifest.jsonl");
    crate::snapshot::save_catalog(&catalog_path, &catalog)?;
    manifest.write_jsonl(&manifest_path)?;
    Ok(GeneratedCorpus { manifest, catalog, store_root, catalog_path, manifest_path })
}
