//! Attribute vocabulary of the fixed schema and the values it yields.
//!
//! Attribute paths are written `<entity>.<field>` (for example
//! `patient.age_years`). Entities form a fixed reference chain
//! `annotation -> image -> study -> patient`; a query targeting one entity may
//! reference attributes of any entity further up that chain.

use std::cmp::Ordering;
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::records::{AnnotationRecord, ImageRecord, PatientRecord, StudyRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Entity {
    Patient,
    Study,
    Image,
    Annotation,
}

impl Entity {
    pub const ALL: [Entity; 4] = [Entity::Patient, Entity::Study, Entity::Image, Entity::Annotation];

    /// Singular name, used as the attribute-path prefix and on result rows.
    pub fn name(self) -> &'static str {
        match self {
            Entity::Patient => "patient",
            Entity::Study => "study",
            Entity::Image => "image",
            Entity::Annotation => "annotation",
        }
    }

    /// Plural table name, used as a query target.
    pub fn table(self) -> &'static str {
        match self {
            Entity::Patient => "patients",
            Entity::Study => "studies",
            Entity::Image => "images",
            Entity::Annotation => "annotations",
        }
    }

    pub fn from_name(s: &str) -> Option<Entity> {
        Entity::ALL.into_iter().find(|e| e.name() == s)
    }

    pub fn from_table(s: &str) -> Option<Entity> {
        Entity::ALL.into_iter().find(|e| e.table() == s)
    }

    /// The entity this one references, if any.
    pub fn parent(self) -> Option<Entity> {
        match self {
            Entity::Patient => None,
            Entity::Study => Some(Entity::Patient),
            Entity::Image => Some(Entity::Study),
            Entity::Annotation => Some(Entity::Image),
        }
    }

    /// Entities reachable by following references from `self`, nearest first,
    /// excluding `self`.
    pub fn ancestors(self) -> Vec<Entity> {
        let mut out = Vec::new();
        let mut cur = self.parent();
        while let Some(e) = cur {
            out.push(e);
            cur = e.parent();
        }
        out
    }

    /// Key-join chain from `self` up to `ancestor` (both excluded/included as
    /// `[next, ..., ancestor]`), or `None` when `ancestor` is not above `self`.
    pub fn chain_to(self, ancestor: Entity) -> Option<Vec<Entity>> {
        let anc = self.ancestors();
        let pos = anc.iter().position(|e| *e == ancestor)?;
        Some(anc[..=pos].to_vec())
    }
}

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Query targets are written with the plural table name.
impl Serialize for Entity {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.table())
    }
}

impl<'de> Deserialize<'de> for Entity {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Entity::from_table(&s).ok_or_else(|| {
            serde::de::Error::custom(format!(
                "unknown target `{s}`, expected one of patients, studies, images, annotations"
            ))
        })
    }
}

/// Kind of value an attribute yields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Int,
    Real,
    Bool,
    Str,
    Date,
    /// Lists render into results but cannot be compared.
    List,
}

impl ValueKind {
    pub fn is_comparable(self) -> bool {
        !matches!(self, ValueKind::List)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttributeDef {
    pub entity: Entity,
    pub field: &'static str,
    pub kind: ValueKind,
}

impl AttributeDef {
    pub fn path(&self) -> String {
        format!("{}.{}", self.entity.name(), self.field)
    }
}

macro_rules! attrs {
    ($($entity:ident . $field:ident : $kind:ident),* $(,)?) => {
        &[$(AttributeDef { entity: Entity::$entity, field: stringify!($field), kind: ValueKind::$kind }),*]
    };
}

/// Every attribute of the schema, grouped by entity in declaration order.
pub static ATTRIBUTES: &[AttributeDef] = attrs![
    Patient.patient_id: Str,
    Patient.age_years: Int,
    Patient.children_count: Int,
    Patient.age_first_pregnancy: Int,
    Patient.age_last_pregnancy: Int,
    Patient.hrt: Bool,
    Patient.hrt_start: Date,
    Patient.site_id: Str,
    Study.study_id: Str,
    Study.patient_id: Str,
    Study.study_date: Date,
    Study.reader_ids: List,
    Study.diagnosis: Str,
    Study.diagnosed_laterality: Str,
    Study.therapy_outcome: Str,
    Image.image_id: Str,
    Image.study_id: Str,
    Image.laterality: Str,
    Image.view: Str,
    Image.breast_area_mm2: Real,
    Image.mean_density: Real,
    Image.feature_vector: List,
    Annotation.annotation_id: Str,
    Annotation.image_id: Str,
    Annotation.author: Str,
    Annotation.kind: Str,
    Annotation.regions: List,
    Annotation.microcalc_count: Int,
    Annotation.session_length_min: Real,
    Annotation.serial_order: Int,
    Annotation.reading: Str,
    Annotation.author_experience_years: Int,
];

/// Looks up an attribute path such as `image.view`.
pub fn attribute(path: &str) -> Option<&'static AttributeDef> {
    let (entity, field) = path.split_once('.')?;
    let entity = Entity::from_name(entity)?;
    ATTRIBUTES.iter().find(|a| a.entity == entity && a.field == field)
}

/// All attribute paths of one entity, in schema order.
pub fn entity_paths(entity: Entity) -> Vec<String> {
    ATTRIBUTES
        .iter()
        .filter(|a| a.entity == entity)
        .map(AttributeDef::path)
        .collect()
}

/// A stored attribute value.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Real(f64),
    Bool(bool),
    Str(String),
    Date(NaiveDate),
    List(Vec<Value>),
}

impl Value {
    /// Text form used in result sets: integers plainly, reals as the shortest
    /// round-trip decimal, dates as `YYYY-MM-DD`, lists as `[a,b,...]`.
    pub fn render(&self) -> String {
        match self {
            Value::Int(v) => v.to_string(),
            Value::Real(v) => v.to_string(),
            Value::Bool(v) => v.to_string(),
            Value::Str(s) => s.clone(),
            Value::Date(d) => d.format("%Y-%m-%d").to_string(),
            Value::List(items) => {
                let inner: Vec<String> = items.iter().map(Value::render).collect();
                format!("[{}]", inner.join(","))
            }
        }
    }

    fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(v) => Some(*v as f64),
            Value::Real(v) => Some(*v),
            _ => None,
        }
    }

    /// Orders two values of compatible kinds; ints and reals compare as reals.
    /// Dates compare with strings holding `YYYY-MM-DD`.
    pub fn compare(&self, other: &Value) -> Option<Ordering> {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => Some(a.cmp(b)),
            (Value::Bool(a), Value::Bool(b)) => Some(a.cmp(b)),
            (Value::Str(a), Value::Str(b)) => Some(a.cmp(b)),
            (Value::Date(a), Value::Date(b)) => Some(a.cmp(b)),
            (Value::Date(a), Value::Str(b)) => parse_date(b).map(|b| a.cmp(&b)),
            (Value::Str(a), Value::Date(b)) => parse_date(a).map(|a| a.cmp(b)),
            (Value::List(_), _) | (_, Value::List(_)) => None,
            (a, b) => a.as_f64()?.partial_cmp(&b.as_f64()?),
        }
    }
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok()
}

fn str_of<T: Serialize>(v: &T) -> Value {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => Value::Str(s),
        other => Value::Str(format!("{other:?}")),
    }
}

impl PatientRecord {
    pub fn field(&self, name: &str) -> Option<Value> {
        Some(match name {
            "patient_id" => Value::Str(self.patient_id.clone()),
            "age_years" => Value::Int(self.age_years),
            "children_count" => Value::Int(self.children_count.into()),
            "age_first_pregnancy" => Value::Int(self.age_first_pregnancy?),
            "age_last_pregnancy" => Value::Int(self.age_last_pregnancy?),
            "hrt" => Value::Bool(self.hrt),
            "hrt_start" => Value::Date(self.hrt_start?),
            "site_id" => Value::Str(self.site_id.0.clone()),
            _ => return None,
        })
    }
}

impl StudyRecord {
    pub fn field(&self, name: &str) -> Option<Value> {
        Some(match name {
            "study_id" => Value::Str(self.study_id.clone()),
            "patient_id" => Value::Str(self.patient_id.clone()),
            "study_date" => Value::Date(self.study_date),
            "reader_ids" => Value::List(self.reader_ids.iter().cloned().map(Value::Str).collect()),
            "diagnosis" => str_of(&self.diagnosis?),
            "diagnosed_laterality" => str_of(&self.diagnosed_laterality?),
            "therapy_outcome" => str_of(&self.therapy_outcome?),
            _ => return None,
        })
    }
}

impl ImageRecord {
    pub fn field(&self, name: &str) -> Option<Value> {
        Some(match name {
            "image_id" => Value::Str(self.image_id.clone()),
            "study_id" => Value::Str(self.study_id.clone()),
            "laterality" => str_of(&self.laterality),
            "view" => str_of(&self.view),
            "breast_area_mm2" => Value::Real(self.breast_area_mm2),
            "mean_density" => Value::Real(self.mean_density),
            "feature_vector" => Value::List(self.feature_vector.iter().copied().map(Value::Real).collect()),
            _ => return None,
        })
    }
}

impl AnnotationRecord {
    pub fn field(&self, name: &str) -> Option<Value> {
        Some(match name {
            "annotation_id" => Value::Str(self.annotation_id.clone()),
            "image_id" => Value::Str(self.image_id.clone()),
            "author" => Value::Str(self.author.to_string()),
            "kind" => str_of(&self.kind),
            "regions" => Value::List(
                self.regions
                    .iter()
                    .map(|r| Value::List([r.x0, r.y0, r.x1, r.y1].into_iter().map(Value::Real).collect()))
                    .collect(),
            ),
            "microcalc_count" => Value::Int(self.microcalc_count?.into()),
            "session_length_min" => Value::Real(self.session_length_min?),
            "serial_order" => Value::Int(self.serial_order?.into()),
            "reading" => str_of(&self.reading?),
            "author_experience_years" => Value::Int(self.author_experience_years?),
            _ => return None,
        })
    }
}
