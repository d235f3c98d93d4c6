//! User-defined filter sets and their evaluation against a single record.
//!
//! Filters combine with AND. The species filter is the one exception: its
//! entries combine with OR, and an empty species list disables it. Every
//! unset bound is vacuously satisfied.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::record::{is_valid_identifier, DatasetClass, FileType, ImageRecord};

/// Upper limits applied when sanitizing client input.
pub const MAX_SPECIES: usize = 64;
pub const MAX_TEXT_LEN: usize = 128;
pub const MAX_AGE_DAYS: u32 = 36_500;
pub const MIN_YEAR: i32 = 1970;
pub const MAX_YEAR: i32 = 2200;

fn all_filetypes() -> BTreeSet<FileType> {
    FileType::ALL.into_iter().collect()
}

fn is_all_filetypes(set: &BTreeSet<FileType>) -> bool {
    set.len() == FileType::ALL.len()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub species: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_min: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_max: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date_min: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date_max: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant_id: Option<String>,
    #[serde(default = "all_filetypes")]
    pub filetypes: BTreeSet<FileType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precompiled_id: Option<String>,
    #[serde(default)]
    pub dataset_class: DatasetClass,
}

impl Default for Query {
    /// The least restrictive query: every filetype, no bounds.
    fn default() -> Self {
        Query {
            species: Vec::new(),
            age_min: None,
            age_max: None,
            date_min: None,
            date_max: None,
            plant_id: None,
            filetypes: all_filetypes(),
            precompiled_id: None,
            dataset_class: DatasetClass::EagliLab,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QueryError {
    #[error("at least one filetype must be selected")]
    NoFiletypes,
    #[error("age_min ({min}) is greater than age_max ({max})")]
    AgeRange { min: u32, max: u32 },
    #[error("date_min ({min}) is after date_max ({max})")]
    DateRange { min: NaiveDate, max: NaiveDate },
    #[error("age bound {0} exceeds the maximum of {MAX_AGE_DAYS} days")]
    AgeTooLarge(u32),
    #[error("date {0} outside the supported years {MIN_YEAR}..={MAX_YEAR}")]
    DateOutOfRange(NaiveDate),
    #[error("too many species selected (max {MAX_SPECIES})")]
    TooManySpecies,
    #[error("species names must be 1..={MAX_TEXT_LEN} printable characters")]
    BadSpecies,
    #[error("plant_id must be 1..=95 characters of [A-Za-z0-9_.-]")]
    BadPlantId,
    #[error("precompiled_id must be 1..=95 characters of [A-Za-z0-9_.-]")]
    BadPrecompiledId,
    #[error("a precompiled dataset cannot be combined with filters")]
    PrecompiledWithFilters,
    #[error("this operation does not accept a precompiled dataset id")]
    PrecompiledNotAllowed,
}

impl Query {
    /// Query for a precompiled dataset; every filter at its default.
    pub fn precompiled(id: impl Into<String>) -> Self {
        Query { precompiled_id: Some(id.into()), ..Query::default() }
    }

    pub fn has_filters(&self) -> bool {
        !self.species.is_empty()
            || self.age_min.is_some()
            || self.age_max.is_some()
            || self.date_min.is_some()
            || self.date_max.is_some()
            || self.plant_id.is_some()
            || !is_all_filetypes(&self.filetypes)
    }

    /// Type and range checks applied before a query touches the catalog.
    pub fn validate(&self) -> Result<(), QueryError> {
        if self.filetypes.is_empty() {
            return Err(QueryError::NoFiletypes);
        }
        if self.species.len() > MAX_SPECIES {
            return Err(QueryError::TooManySpecies);
        }
        for s in &self.species {
            if s.is_empty() || s.chars().count() > MAX_TEXT_LEN || s.chars().any(char::is_control) {
                return Err(QueryError::BadSpecies);
            }
        }
        for age in [self.age_min, self.age_max].into_iter().flatten() {
            if age > MAX_AGE_DAYS {
                return Err(QueryError::AgeTooLarge(age));
            }
        }
        if let (Some(min), Some(max)) = (self.age_min, self.age_max) {
            if min > max {
                return Err(QueryError::AgeRange { min, max });
            }
        }
        for date in [self.date_min, self.date_max].into_iter().flatten() {
            if !(MIN_YEAR..=MAX_YEAR).contains(&date.year()) {
                return Err(QueryError::DateOutOfRange(date));
            }
        }
        if let (Some(min), Some(max)) = (self.date_min, self.date_max) {
            if min > max {
                return Err(QueryError::DateRange { min, max });
            }
        }
        if let Some(id) = &self.plant_id {
            if !is_valid_identifier(id) {
                return Err(QueryError::BadPlantId);
            }
        }
        if let Some(id) = &self.precompiled_id {
            if !is_valid_identifier(id) {
                return Err(QueryError::BadPrecompiledId);
            }
            if self.has_filters() {
                return Err(QueryError::PrecompiledWithFilters);
            }
        }
        Ok(())
    }

    /// Validation for operations that evaluate filters against the catalog.
    pub fn validate_filter(&self) -> Result<(), QueryError> {
        self.validate()?;
        if self.precompiled_id.is_some() {
            return Err(QueryError::PrecompiledNotAllowed);
        }
        Ok(())
    }

    /// Whether `record` satisfies every clause. Total on valid queries.
    pub fn matches(&self, record: &ImageRecord) -> bool {
        if record.dataset_class != self.dataset_class || !self.filetypes.contains(&record.filetype) {
            return false;
        }
        if !self.species.is_empty() {
            match &record.label {
                Some(label) if self.species.iter().any(|s| s == label) => {}
                _ => return false,
            }
        }
        if self.age_min.is_some() || self.age_max.is_some() {
            let Some(age) = record.age_days else { return false };
            if self.age_min.is_some_and(|min| age < min) || self.age_max.is_some_and(|max| age > max) {
                return false;
            }
        }
        let day = record.capture_date();
        if self.date_min.is_some_and(|min| day < min) || self.date_max.is_some_and(|max| day > max) {
            return false;
        }
        if let Some(pid) = &self.plant_id {
            if record.plant_id.as_ref() != Some(pid) {
                return false;
            }
        }
        true
    }
}

/// Answer to a Check Query request.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySummary {
    pub file_count: u64,
    pub part_count: u64,
    pub total_bytes: u64,
}
