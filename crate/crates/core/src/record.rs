//! Image metadata records and the identifiers they carry.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

/// The four kinds of file a dataset can be assembled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FileType {
    /// A single plant cropped out of an original frame.
    #[serde(rename = "single_plant")]
    SinglePlantImage,
    /// The original camera frame, usually showing several plants.
    #[serde(rename = "multiple_plant")]
    MultiplePlantImage,
    /// A copy of the original frame with the crop boundaries drawn in.
    #[serde(rename = "annotated")]
    AnnotatedMultiplePlantImage,
    /// The metadata document of an image, as JSON.
    #[serde(rename = "metadata_json")]
    MetadataJson,
}

impl FileType {
    pub const ALL: [FileType; 4] = [
        FileType::SinglePlantImage,
        FileType::MultiplePlantImage,
        FileType::AnnotatedMultiplePlantImage,
        FileType::MetadataJson,
    ];

    /// Wire name, as used in query documents and CLI flags.
    pub fn as_str(self) -> &'static str {
        match self {
            FileType::SinglePlantImage => "single_plant",
            FileType::MultiplePlantImage => "multiple_plant",
            FileType::AnnotatedMultiplePlantImage => "annotated",
            FileType::MetadataJson => "metadata_json",
        }
    }

    pub fn parse(s: &str) -> Option<FileType> {
        FileType::ALL.into_iter().find(|ft| ft.as_str() == s)
    }

    /// File extension used for archive entries of this type.
    pub fn extension(self) -> &'static str {
        match self {
            FileType::MetadataJson => "json",
            _ => "png",
        }
    }

    pub fn is_image(self) -> bool {
        !matches!(self, FileType::MetadataJson)
    }
}

impl fmt::Display for FileType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which family of data a record belongs to; each one is a tab in the UI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum DatasetClass {
    /// Lab images from the robotic imager.
    #[default]
    #[serde(rename = "eagli")]
    EagliLab,
    #[serde(rename = "field")]
    Field,
}

impl DatasetClass {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetClass::EagliLab => "eagli",
            DatasetClass::Field => "field",
        }
    }

    pub fn parse(s: &str) -> Option<DatasetClass> {
        match s {
            "eagli" => Some(DatasetClass::EagliLab),
            "field" => Some(DatasetClass::Field),
            _ => None,
        }
    }
}

/// Object-store key. Non-empty, `/`-separated, and free of `.`/`..` or empty
/// segments so it can be mapped onto a directory tree safely.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BlobKey(String);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid blob key {key:?}: {reason}")]
pub struct InvalidBlobKey {
    pub key: String,
    pub reason: &'static str,
}

impl BlobKey {
    pub fn new(key: impl Into<String>) -> Result<Self, InvalidBlobKey> {
        let key = key.into();
        let reason = if key.is_empty() {
            Some("empty")
        } else if key.starts_with('/') {
            Some("absolute path")
        } else if key.contains('\\') || key.contains('\0') {
            Some("forbidden character")
        } else if key.split('/').any(|seg| seg.is_empty() || seg == "." || seg == "..") {
            Some("empty, '.' or '..' segment")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(InvalidBlobKey { key, reason }),
            None => Ok(BlobKey(key)),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }
}

impl TryFrom<String> for BlobKey {
    type Error = InvalidBlobKey;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        BlobKey::new(value)
    }
}

impl From<BlobKey> for String {
    fn from(k: BlobKey) -> String {
        k.0
    }
}

impl fmt::Display for BlobKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Camera position and orientation at capture time. The frame of reference
/// is opaque to the portal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub pan: f64,
    pub tilt: f64,
}

/// One metadata document per stored file.
///
/// `plant_id` and the crop box exist only on cropped single-plant images and
/// on the metadata documents describing them. The plant fields (`label`,
/// `age_days`, ...) are optional because field data may not carry them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub record_id: String,
    pub filetype: FileType,
    #[serde(default)]
    pub dataset_class: DatasetClass,
    pub blob_key: BlobKey,
    pub byte_size: u64,
    pub camera_lens: String,
    pub camera_pose: CameraPose,
    pub capture_datetime: DateTime<Utc>,
    pub institute_room: String,
    pub width_px: u32,
    pub height_px: u32,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scientific_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planting_date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_days: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_min: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_max: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_min: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_max: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecordError {
    #[error("record id must be 1..=95 characters of [A-Za-z0-9_.-]")]
    BadRecordId,
    #[error("image dimensions must be positive")]
    ZeroDimensions,
    #[error("age_days {stated} disagrees with planting/capture dates ({computed} days)")]
    AgeMismatch { stated: u32, computed: i64 },
    #[error("capture happened before planting")]
    CapturedBeforePlanting,
    #[error("crop box must have all four of x_min, x_max, y_min, y_max or none")]
    PartialCropBox,
    #[error("crop box outside image bounds or degenerate")]
    CropOutOfBounds,
    #[error("{0} records must not carry a plant id or crop box")]
    CroppedFieldsOnOriginal(FileType),
    #[error("single plant images need a plant id and crop box")]
    MissingCropFields,
}

/// Longest identifier accepted; keeps `<id>.<ext>` within a plain ustar name.
pub const MAX_IDENTIFIER_LEN: usize = 95;

/// Record ids appear verbatim as archive entry names, so they are restricted
/// to a filename-safe alphabet.
pub fn is_valid_identifier(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= MAX_IDENTIFIER_LEN
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
        && !id.starts_with('.')
}

impl ImageRecord {
    pub fn crop_box(&self) -> Option<(u32, u32, u32, u32)> {
        match (self.x_min, self.x_max, self.y_min, self.y_max) {
            (Some(a), Some(b), Some(c), Some(d)) => Some((a, b, c, d)),
            _ => None,
        }
    }

    pub fn capture_date(&self) -> NaiveDate {
        self.capture_datetime.date_naive()
    }

    /// Checks every invariant that can be decided from the record alone.
    pub fn validate(&self) -> Result<(), RecordError> {
        if !is_valid_identifier(&self.record_id) {
            return Err(RecordError::BadRecordId);
        }
        if self.width_px == 0 || self.height_px == 0 {
            return Err(RecordError::ZeroDimensions);
        }
        if let Some(planted) = self.planting_date {
            let computed = (self.capture_date() - planted).num_days();
            if computed < 0 {
                return Err(RecordError::CapturedBeforePlanting);
            }
            if let Some(stated) = self.age_days {
                if i64::from(stated) != computed {
                    return Err(RecordError::AgeMismatch { stated, computed });
                }
            }
        }

        let any_crop = self.x_min.is_some()
            || self.x_max.is_some()
            || self.y_min.is_some()
            || self.y_max.is_some();
        let crop = self.crop_box();
        if any_crop && crop.is_none() {
            return Err(RecordError::PartialCropBox);
        }
        if let Some((x0, x1, y0, y1)) = crop {
            if !(x0 < x1 && x1 <= self.width_px && y0 < y1 && y1 <= self.height_px) {
                return Err(RecordError::CropOutOfBounds);
            }
        }

        match self.filetype {
            FileType::MultiplePlantImage | FileType::AnnotatedMultiplePlantImage => {
                if crop.is_some() || self.plant_id.is_some() {
                    return Err(RecordError::CroppedFieldsOnOriginal(self.filetype));
                }
            }
            FileType::SinglePlantImage => {
                if crop.is_none() || self.plant_id.is_none() {
                    return Err(RecordError::MissingCropFields);
                }
            }
            FileType::MetadataJson => {}
        }
        Ok(())
    }

    /// Archive entry name: `<record_id>.png` for images, `<record_id>.json`
    /// for metadata documents.
    pub fn archive_name(&self) -> String {
        alloc::format!("{}.{}", self.record_id, self.filetype.extension())
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;
    use chrono::TimeZone;

    pub fn crop(id: &str, label: &str, planted: (i32, u32, u32), captured: (i32, u32, u32)) -> ImageRecord {
        let planting = NaiveDate::from_ymd_opt(planted.0, planted.1, planted.2).unwrap();
        let capture = Utc
            .with_ymd_and_hms(captured.0, captured.1, captured.2, 10, 30, 0)
            .unwrap();
        ImageRecord {
            record_id: id.to_string(),
            filetype: FileType::SinglePlantImage,
            dataset_class: DatasetClass::EagliLab,
            blob_key: BlobKey::new(alloc::format!("eagli/{id}.png")).unwrap(),
            byte_size: 1234,
            camera_lens: "Canon EOS / 24mm".to_string(),
            camera_pose: CameraPose { x: 0.1, y: 0.2, z: 1.0, pan: 10.0, tilt: -5.0 },
            capture_datetime: capture,
            institute_room: "UWinnipeg / growth chamber 1".to_string(),
            width_px: 4000,
            height_px: 3000,
            tags: vec![],
            plant_id: Some(alloc::format!("plant-{id}")),
            label: Some(label.to_string()),
            scientific_name: Some("Glycine max".to_string()),
            planting_date: Some(planting),
            age_days: Some((capture.date_naive() - planting).num_days() as u32),
            position_id: Some("pos-3".to_string()),
            x_min: Some(100),
            x_max: Some(600),
            y_min: Some(200),
            y_max: Some(900),
        }
    }
}
