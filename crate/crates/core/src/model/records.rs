//! Per-site mammogram metadata records.
//!
//! Every record is an immutable value; a [`SiteStore`](super::SiteStore) only ever
//! appends them.

use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

/// Identifier of a grid site (one hospital node).
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SiteId(pub String);

impl SiteId {
    pub fn new(id: impl Into<String>) -> Self {
        SiteId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SiteId {
    fn from(s: &str) -> Self {
        SiteId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRecord {
    pub patient_id: String,
    pub age_years: i64,
    pub children_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_first_pregnancy: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_last_pregnancy: Option<i64>,
    pub hrt: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hrt_start: Option<NaiveDate>,
    /// Filled in with the owning store's site when left empty at ingestion.
    #[serde(default, skip_serializing_if = "SiteId::is_empty")]
    pub site_id: SiteId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Diagnosis {
    Normal,
    Benign,
    Cancer,
}

/// Breast side as recorded on a diagnosis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TherapyOutcome {
    Successful,
    Unsuccessful,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyRecord {
    pub study_id: String,
    pub patient_id: String,
    pub study_date: NaiveDate,
    #[serde(default)]
    pub reader_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<Diagnosis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosed_laterality: Option<Side>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub therapy_outcome: Option<TherapyOutcome>,
}

/// Image laterality as written on the film: `L` or `R`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Laterality {
    L,
    R,
}

/// Mammographic projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum View {
    /// Medio-lateral oblique.
    MLO,
    /// Cranio-caudal.
    CC,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::MLO => "MLO",
            View::CC => "CC",
        }
    }
}

pub const FEATURE_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_id: String,
    pub study_id: String,
    pub laterality: Laterality,
    pub view: View,
    pub breast_area_mm2: f64,
    pub mean_density: f64,
    pub feature_vector: [f64; FEATURE_LEN],
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Author {
    Radiologist(String),
    Cad,
}

impl fmt::Display for Author {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Author::Radiologist(id) => write!(f, "radiologist:{id}"),
            Author::Cad => f.write_str("cad"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationKind {
    Mass,
    MicrocalcificationCluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reading {
    First,
    Second,
}

/// Axis-aligned rectangle in millimetres, serialized as `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite()) && self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn contains_cell(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> bool {
        self.x0 <= x0 && x1 <= self.x1 && self.y0 <= y0 && y1 <= self.y1
    }
}

impl From<[f64; 4]> for Rect {
    fn from(v: [f64; 4]) -> Self {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Rect> for [f64; 4] {
    fn from(r: Rect) -> Self {
        [r.x0, r.y0, r.x1, r.y1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub annotation_id: String,
    pub image_id: String,
    pub author: Author,
    pub kind: AnnotationKind,
    #[serde(default)]
    pub regions: Vec<Rect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub microcalc_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_length_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub serial_order: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reading: Option<Reading>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author_experience_years: Option<i64>,
}

/// Any one stored record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "entity", rename_all = "lowercase")]
pub enum Record {
    Patient(PatientRecord),
    Study(StudyRecord),
    Image(ImageRecord),
    Annotation(AnnotationRecord),
}

impl Record {
    pub fn entity(&self) -> super::Entity {
        use super::Entity;
        match self {
            Record::Patient(_) => Entity::Patient,
            Record::Study(_) => Entity::Study,
            Record::Image(_) => Entity::Image,
            Record::Annotation(_) => Entity::Annotation,
        }
    }

    pub fn id(&self) -> &str {
        match self {
            Record::Patient(p) => &p.patient_id,
            Record::Study(s) => &s.study_id,
            Record::Image(i) => &i.image_id,
            Record::Annotation(a) => &a.annotation_id,
        }
    }

    /// Serializes the record as one ingestion line (no trailing newline).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }
}
