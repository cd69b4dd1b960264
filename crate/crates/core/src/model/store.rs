//! Embedded per-site store with line-atomic JSONL ingestion.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;

use serde::Serialize;

use super::records::*;
use super::schema::Entity;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read ingestion source: {0}")]
    Io(#[from] std::io::Error),
}

/// Outcome of one ingestion batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub accepted: usize,
    /// `(line number starting at 1, reason)`
    pub rejected: Vec<(usize, String)>,
    pub new_version: u64,
}

/// One site's metadata tables.
///
/// Tables are keyed by record id. `data_version` counts the ingestion batches
/// that accepted at least one record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SiteStore {
    site_id: SiteId,
    patients: BTreeMap<String, PatientRecord>,
    studies: BTreeMap<String, StudyRecord>,
    images: BTreeMap<String, ImageRecord>,
    annotations: BTreeMap<String, AnnotationRecord>,
    studies_by_patient: HashMap<String, Vec<String>>,
    images_by_study: HashMap<String, Vec<String>>,
    annotations_by_image: HashMap<String, Vec<String>>,
    /// (study_id, laterality, view) of every stored image.
    image_slots: HashSet<(String, Laterality, View)>,
    data_version: u64,
}

impl SiteStore {
    pub fn new(site_id: SiteId) -> Self {
        SiteStore {
            site_id,
            ..Default::default()
        }
    }

    pub fn site_id(&self) -> &SiteId {
        &self.site_id
    }

    pub fn data_version(&self) -> u64 {
        self.data_version
    }

    pub fn len(&self) -> usize {
        self.patients.len() + self.studies.len() + self.images.len() + self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patient(&self, id: &str) -> Option<&PatientRecord> {
        self.patients.get(id)
    }

    pub fn study(&self, id: &str) -> Option<&StudyRecord> {
        self.studies.get(id)
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.get(id)
    }

    pub fn annotation(&self, id: &str) -> Option<&AnnotationRecord> {
        self.annotations.get(id)
    }

    pub fn patients(&self) -> impl Iterator<Item = &PatientRecord> {
        self.patients.values()
    }

    pub fn studies(&self) -> impl Iterator<Item = &StudyRecord> {
        self.studies.values()
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRecord> {
        self.images.values()
    }

    pub fn annotations(&self) -> impl Iterator<Item = &AnnotationRecord> {
        self.annotations.values()
    }

    /// Ids of one table in ascending order.
    pub fn ids(&self, entity: Entity) -> Vec<&str> {
        match entity {
            Entity::Patient => self.patients.keys().map(String::as_str).collect(),
            Entity::Study => self.studies.keys().map(String::as_str).collect(),
            Entity::Image => self.images.keys().map(String::as_str).collect(),
            Entity::Annotation => self.annotations.keys().map(String::as_str).collect(),
        }
    }

    /// The store's own copy of `id` in one table, if present.
    pub fn stored_id(&self, entity: Entity, id: &str) -> Option<&str> {
        match entity {
            Entity::Patient => self.patients.get_key_value(id).map(|(k, _)| k.as_str()),
            Entity::Study => self.studies.get_key_value(id).map(|(k, _)| k.as_str()),
            Entity::Image => self.images.get_key_value(id).map(|(k, _)| k.as_str()),
            Entity::Annotation => self.annotations.get_key_value(id).map(|(k, _)| k.as_str()),
        }
    }

    pub fn studies_of(&self, patient_id: &str) -> impl Iterator<Item = &StudyRecord> {
        self.children(&self.studies_by_patient, patient_id)
            .filter_map(|id| self.studies.get(id))
    }

    pub fn images_of(&self, study_id: &str) -> impl Iterator<Item = &ImageRecord> {
        self.children(&self.images_by_study, study_id)
            .filter_map(|id| self.images.get(id))
    }

    pub fn annotations_of(&self, image_id: &str) -> impl Iterator<Item = &AnnotationRecord> {
        self.children(&self.annotations_by_image, image_id)
            .filter_map(|id| self.annotations.get(id))
    }

    fn children<'a>(&'a self, index: &'a HashMap<String, Vec<String>>, key: &str) -> impl Iterator<Item = &'a String> {
        index.get(key).into_iter().flatten()
    }

    /// Returns the record with `id` from one table. Tables are disjoint keyspaces.
    pub fn get_entity(&self, entity: Entity, id: &str) -> Option<Record> {
        match entity {
            Entity::Patient => self.patients.get(id).cloned().map(Record::Patient),
            Entity::Study => self.studies.get(id).cloned().map(Record::Study),
            Entity::Image => self.images.get(id).cloned().map(Record::Image),
            Entity::Annotation => self.annotations.get(id).cloned().map(Record::Annotation),
        }
    }

    /// Ingests a JSONL stream, one record per line.
    ///
    /// Each line is accepted or rejected as a whole; a batch that accepts at
    /// least one record bumps `data_version` exactly once. Blank lines are
    /// skipped without being counted.
    pub fn ingest_records<R: BufRead>(&mut self, source: R) -> Result<IngestReport, IngestError> {
        let mut accepted = 0;
        let mut rejected = Vec::new();
        for (idx, line) in source.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let line_no = idx + 1;
            match serde_json::from_str::<Record>(&line) {
                Err(e) => rejected.push((line_no, format!("malformed: {e}"))),
                Ok(record) => match self.insert(record) {
                    Ok(()) => accepted += 1,
                    Err(reason) => rejected.push((line_no, reason)),
                },
            }
        }
        if accepted > 0 {
            self.data_version += 1;
        }
        Ok(IngestReport {
            accepted,
            rejected,
            new_version: self.data_version,
        })
    }

    /// Ingests already-parsed records as one batch.
    pub fn ingest_batch(&mut self, records: impl IntoIterator<Item = Record>) -> IngestReport {
        let mut accepted = 0;
        let mut rejected = Vec::new();
        for (idx, record) in records.into_iter().enumerate() {
            match self.insert(record) {
                Ok(()) => accepted += 1,
                Err(reason) => rejected.push((idx + 1, reason)),
            }
        }
        if accepted > 0 {
            self.data_version += 1;
        }
        IngestReport {
            accepted,
            rejected,
            new_version: self.data_version,
        }
    }

    /// Validates then inserts a record; nothing is written on rejection.
    fn insert(&mut self, record: Record) -> Result<(), String> {
        match record {
            Record::Patient(mut p) => {
                if p.site_id.is_empty() {
                    p.site_id = self.site_id.clone();
                } else if p.site_id != self.site_id {
                    return Err(format!("site mismatch site_id={}", p.site_id));
                }
                validate_patient(&p)?;
                if self.patients.contains_key(&p.patient_id) {
                    return Err("duplicate".into());
                }
                self.patients.insert(p.patient_id.clone(), p);
            }
            Record::Study(s) => {
                validate_study(&s)?;
                if self.studies.contains_key(&s.study_id) {
                    return Err("duplicate".into());
                }
                if !self.patients.contains_key(&s.patient_id) {
                    return Err(format!("dangling reference patient_id={}", s.patient_id));
                }
                self.studies_by_patient
                    .entry(s.patient_id.clone())
                    .or_default()
                    .push(s.study_id.clone());
                self.studies.insert(s.study_id.clone(), s);
            }
            Record::Image(i) => {
                validate_image(&i)?;
                if self.images.contains_key(&i.image_id) {
                    return Err("duplicate".into());
                }
                if !self.studies.contains_key(&i.study_id) {
                    return Err(format!("dangling reference study_id={}", i.study_id));
                }
                let slot = (i.study_id.clone(), i.laterality, i.view);
                if self.image_slots.contains(&slot) {
                    return Err(format!(
                        "duplicate view {:?}/{} in study {}",
                        i.laterality,
                        i.view.as_str(),
                        i.study_id
                    ));
                }
                self.image_slots.insert(slot);
                self.images_by_study
                    .entry(i.study_id.clone())
                    .or_default()
                    .push(i.image_id.clone());
                self.images.insert(i.image_id.clone(), i);
            }
            Record::Annotation(a) => {
                validate_annotation(&a)?;
                if self.annotations.contains_key(&a.annotation_id) {
                    return Err("duplicate".into());
                }
                if !self.images.contains_key(&a.image_id) {
                    return Err(format!("dangling reference image_id={}", a.image_id));
                }
                self.annotations_by_image
                    .entry(a.image_id.clone())
                    .or_default()
                    .push(a.annotation_id.clone());
                self.annotations.insert(a.annotation_id.clone(), a);
            }
        }
        Ok(())
    }
}

fn check_text(field: &str, value: &str) -> Result<(), String> {
    if value.is_empty() {
        return Err(format!("empty {field}"));
    }
    // Characters XML 1.0 cannot carry at all.
    if value
        .chars()
        .any(|c| c.is_control() && !matches!(c, '\t' | '\n' | '\r'))
    {
        return Err(format!("control character in {field}"));
    }
    Ok(())
}

fn validate_patient(p: &PatientRecord) -> Result<(), String> {
    check_text("patient_id", &p.patient_id)?;
    if !(0..=130).contains(&p.age_years) {
        return Err(format!("age_years out of range: {}", p.age_years));
    }
    if p.children_count == 0 && (p.age_first_pregnancy.is_some() || p.age_last_pregnancy.is_some()) {
        return Err("pregnancy ages given with children_count=0".into());
    }
    if let (Some(first), Some(last)) = (p.age_first_pregnancy, p.age_last_pregnancy) {
        if first > last {
            return Err("age_first_pregnancy after age_last_pregnancy".into());
        }
    }
    Ok(())
}

fn validate_study(s: &StudyRecord) -> Result<(), String> {
    check_text("study_id", &s.study_id)?;
    for r in &s.reader_ids {
        check_text("reader_ids", r)?;
    }
    let is_cancer = s.diagnosis == Some(Diagnosis::Cancer);
    if is_cancer != s.diagnosed_laterality.is_some() {
        return Err("diagnosed_laterality must be present exactly when diagnosis is cancer".into());
    }
    Ok(())
}

fn validate_image(i: &ImageRecord) -> Result<(), String> {
    check_text("image_id", &i.image_id)?;
    if !(i.breast_area_mm2.is_finite() && i.breast_area_mm2 > 0.0) {
        return Err("breast_area_mm2 must be positive".into());
    }
    if !(0.0..=1.0).contains(&i.mean_density) {
        return Err("mean_density outside [0,1]".into());
    }
    if i.feature_vector.iter().any(|v| !v.is_finite()) {
        return Err("non-finite feature_vector entry".into());
    }
    Ok(())
}

fn validate_annotation(a: &AnnotationRecord) -> Result<(), String> {
    check_text("annotation_id", &a.annotation_id)?;
    if let Author::Radiologist(id) = &a.author {
        check_text("author", id)?;
    }
    if let Some(bad) = a.regions.iter().find(|r| !r.is_valid()) {
        return Err(format!("region without positive area: {:?}", <[f64; 4]>::from(*bad)));
    }
    let is_micro = a.kind == AnnotationKind::MicrocalcificationCluster;
    if is_micro != a.microcalc_count.is_some() {
        return Err("microcalc_count must be present exactly for microcalcification clusters".into());
    }
    if a.serial_order == Some(0) {
        return Err("serial_order must be positive".into());
    }
    if let Some(len) = a.session_length_min {
        if !(len.is_finite() && len >= 0.0) {
            return Err("session_length_min must be non-negative".into());
        }
    }
    Ok(())
}
