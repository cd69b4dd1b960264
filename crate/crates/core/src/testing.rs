//! Random datasets, random queries and a brute-force reference evaluator.
//!
//! The evaluator here shares no code with [`crate::local`]: it walks the
//! union of every site's records directly, resolving references by id, and
//! recomputes derived values from the raw records. Record ids are unique
//! across sites so the union is well defined.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::local::{DENSITY_ASYMMETRY, FIND_ONE_LIKE_IT};
use crate::model::{
    attribute, AnnotationKind, AnnotationRecord, Author, Diagnosis, Entity, ImageRecord, Laterality, PatientRecord,
    Reading, Record, Rect, Side, SiteId, SiteStore, StudyRecord, TherapyOutcome, Value, View, ATTRIBUTES,
};
use crate::query::{CmpOp, FormalQuery, Literal, ParamValue, Params, PredicateNode, Projection};

/// Records of several sites, each list in valid ingestion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sites: Vec<(SiteId, Vec<Record>)>,
}

pub fn site_names(k: usize) -> Vec<SiteId> {
    (0..k)
        .map(|i| SiteId::new(((b'A' + i as u8) as char).to_string()))
        .collect()
}

fn date<R: Rng>(rng: &mut R) -> NaiveDate {
    NaiveDate::from_ymd_opt(rng.gen_range(1998..2007), rng.gen_range(1..13), rng.gen_range(1..29)).unwrap()
}

/// Feature entries on a coarse grid so that exact duplicates occur.
fn feature<R: Rng>(rng: &mut R) -> f64 {
    rng.gen_range(0..5) as f64 * 0.5
}

fn random_patient<R: Rng>(rng: &mut R, id: String) -> PatientRecord {
    let children_count = rng.gen_range(0..7);
    let (first, last) = if children_count > 0 && rng.gen_bool(0.7) {
        let a = rng.gen_range(18..35);
        (Some(a), Some(a + rng.gen_range(0..8)))
    } else {
        (None, None)
    };
    let hrt = rng.gen_bool(0.4);
    PatientRecord {
        patient_id: id,
        age_years: rng.gen_range(40..76),
        children_count,
        age_first_pregnancy: first,
        age_last_pregnancy: last,
        hrt,
        hrt_start: (hrt && rng.gen_bool(0.6)).then(|| date(rng)),
        site_id: SiteId::default(),
    }
}

fn random_study<R: Rng>(rng: &mut R, id: String, patient: &str) -> StudyRecord {
    let diagnosis = match rng.gen_range(0..5) {
        0 => None,
        1 => Some(Diagnosis::Normal),
        2 => Some(Diagnosis::Benign),
        _ => Some(Diagnosis::Cancer),
    };
    let cancer = diagnosis == Some(Diagnosis::Cancer);
    StudyRecord {
        study_id: id,
        patient_id: patient.to_string(),
        study_date: date(rng),
        reader_ids: ["R1", "R2", "R3"]
            .choose_multiple(rng, 2)
            .map(|s| s.to_string())
            .collect(),
        diagnosis,
        diagnosed_laterality: cancer.then(|| if rng.gen() { Side::Left } else { Side::Right }),
        therapy_outcome: match rng.gen_range(0..3) {
            0 => None,
            1 => Some(TherapyOutcome::Successful),
            _ => Some(TherapyOutcome::Unsuccessful),
        },
    }
}

fn random_image<R: Rng>(rng: &mut R, id: String, study: &str, lat: Laterality, view: View) -> ImageRecord {
    let mut fv = [0.0; 8];
    fv.iter_mut().for_each(|v| *v = feature(rng));
    ImageRecord {
        image_id: id,
        study_id: study.to_string(),
        laterality: lat,
        view,
        breast_area_mm2: rng.gen_range(5000..25000) as f64 + 0.5,
        mean_density: rng.gen_range(0..=20) as f64 / 20.0,
        feature_vector: fv,
    }
}

fn random_rect<R: Rng>(rng: &mut R) -> Rect {
    let (x, y) = (rng.gen_range(0..40) as f64, rng.gen_range(0..40) as f64);
    Rect::new(x, y, x + rng.gen_range(1..12) as f64, y + rng.gen_range(1..12) as f64)
}

fn random_annotation<R: Rng>(rng: &mut R, id: String, image: &str) -> AnnotationRecord {
    let kind = if rng.gen() {
        AnnotationKind::Mass
    } else {
        AnnotationKind::MicrocalcificationCluster
    };
    AnnotationRecord {
        annotation_id: id,
        image_id: image.to_string(),
        author: if rng.gen_bool(0.25) {
            Author::Cad
        } else {
            Author::Radiologist(format!("R{}", rng.gen_range(1..4)))
        },
        kind,
        regions: (0..rng.gen_range(1..4)).map(|_| random_rect(rng)).collect(),
        microcalc_count: (kind == AnnotationKind::MicrocalcificationCluster).then(|| rng.gen_range(0..15)),
        session_length_min: rng.gen_bool(0.5).then(|| rng.gen_range(10..90) as f64),
        serial_order: rng.gen_bool(0.5).then(|| rng.gen_range(1..40)),
        reading: match rng.gen_range(0..3) {
            0 => None,
            1 => Some(Reading::First),
            _ => Some(Reading::Second),
        },
        author_experience_years: rng.gen_bool(0.5).then(|| rng.gen_range(1..30)),
    }
}

/// Generates one site's records, stopping before `max_records` is exceeded.
pub fn random_site_records<R: Rng>(rng: &mut R, site: &SiteId, patients: usize, max_records: usize) -> Vec<Record> {
    let mut out = Vec::new();
    for p in 0..patients {
        let mut group = Vec::new();
        let pid = format!("{site}-P{p}");
        group.push(Record::Patient(random_patient(rng, pid.clone())));
        for s in 0..rng.gen_range(1..4) {
            let sid = format!("{pid}-S{s}");
            group.push(Record::Study(random_study(rng, sid.clone(), &pid)));
            let mut slots = [
                (Laterality::L, View::MLO),
                (Laterality::L, View::CC),
                (Laterality::R, View::MLO),
                (Laterality::R, View::CC),
            ];
            slots.shuffle(rng);
            for (i, (lat, view)) in slots.into_iter().take(rng.gen_range(0..5)).enumerate() {
                let iid = format!("{sid}-I{i}");
                group.push(Record::Image(random_image(rng, iid.clone(), &sid, lat, view)));
                for a in 0..rng.gen_range(0..3) {
                    group.push(Record::Annotation(random_annotation(rng, format!("{iid}-A{a}"), &iid)));
                }
            }
        }
        if out.len() + group.len() > max_records {
            break;
        }
        out.extend(group);
    }
    out
}

/// `k` sites with up to `max_records` records each.
pub fn random_dataset<R: Rng>(rng: &mut R, k: usize, max_records: usize) -> Dataset {
    let sites = site_names(k)
        .into_iter()
        .map(|site| {
            let patients = rng.gen_range(0..=max_records / 8 + 1);
            let records = random_site_records(rng, &site, patients, max_records);
            (site, records)
        })
        .collect();
    Dataset { sites }
}

impl Dataset {
    /// One store per site, every record ingested in a single batch.
    pub fn stores(&self) -> Vec<SiteStore> {
        self.sites
            .iter()
            .map(|(site, records)| {
                let mut s = SiteStore::new(site.clone());
                let report = s.ingest_batch(records.iter().cloned());
                assert!(
                    report.rejected.is_empty(),
                    "generator produced invalid records: {:?}",
                    report.rejected
                );
                s
            })
            .collect()
    }

    /// Sites in the dataset except `skip`.
    pub fn without(&self, skip: &SiteId) -> Dataset {
        Dataset {
            sites: self.sites.iter().filter(|(s, _)| s != skip).cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sites.iter().map(|(_, r)| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn id_literal<R: Rng>(rng: &mut R, sites: &[SiteId], suffix: &str) -> Literal {
    let site = sites.choose(rng).map(SiteId::as_str).unwrap_or("A");
    Literal::Str(format!("{site}-P{}{suffix}", rng.gen_range(0..6)))
}

fn choice(rng: &mut impl Rng, words: &[&str]) -> Literal {
    Literal::Str(words.choose(rng).unwrap().to_string())
}

/// A plausible literal for the attribute, occasionally of the wrong kind.
fn literal_for<R: Rng>(rng: &mut R, path: &str, sites: &[SiteId]) -> Literal {
    if rng.gen_bool(0.03) {
        return match rng.gen_range(0..3) {
            0 => Literal::Int(rng.gen_range(0..3)),
            1 => Literal::Bool(rng.gen()),
            _ => Literal::Str("<&>\"'".into()),
        };
    }
    match path {
        "patient.patient_id" | "study.patient_id" => id_literal(rng, sites, ""),
        "study.study_id" | "image.study_id" => id_literal(rng, sites, "-S0"),
        "image.image_id" | "annotation.image_id" => id_literal(rng, sites, "-S0-I0"),
        "annotation.annotation_id" => id_literal(rng, sites, "-S0-I0-A0"),
        "patient.site_id" => Literal::Str(sites.choose(rng).map(SiteId::to_string).unwrap_or_default()),
        "patient.age_years" => Literal::Int(rng.gen_range(38..78)),
        "patient.children_count" => Literal::Int(rng.gen_range(0..8)),
        "patient.age_first_pregnancy" | "patient.age_last_pregnancy" => Literal::Int(rng.gen_range(16..44)),
        "patient.hrt" => Literal::Bool(rng.gen()),
        "patient.hrt_start" | "study.study_date" => Literal::Str(date(rng).format("%Y-%m-%d").to_string()),
        "study.diagnosis" => choice(rng, &["normal", "benign", "cancer"]),
        "study.diagnosed_laterality" => choice(rng, &["left", "right"]),
        "study.therapy_outcome" => choice(rng, &["successful", "unsuccessful"]),
        "image.laterality" => choice(rng, &["L", "R"]),
        "image.view" => choice(rng, &["MLO", "CC"]),
        "image.breast_area_mm2" => Literal::Real(rng.gen_range(4000..26000) as f64 + 0.5),
        "image.mean_density" => {
            if rng.gen() {
                Literal::Real(rng.gen_range(0..=20) as f64 / 20.0)
            } else {
                Literal::Int(rng.gen_range(0..2))
            }
        }
        "annotation.author" => choice(rng, &["cad", "radiologist:R1", "radiologist:R2", "radiologist:R3"]),
        "annotation.kind" => choice(rng, &["mass", "microcalcification_cluster"]),
        "annotation.microcalc_count" => Literal::Int(rng.gen_range(0..16)),
        "annotation.session_length_min" => Literal::Real(rng.gen_range(5..95) as f64),
        "annotation.serial_order" => Literal::Int(rng.gen_range(0..42)),
        "annotation.reading" => choice(rng, &["first", "second"]),
        "annotation.author_experience_years" => Literal::Int(rng.gen_range(0..32)),
        _ => Literal::Int(0),
    }
}

/// Comparable attribute paths a query on `target` may reference.
pub fn reachable_paths(target: Entity) -> Vec<String> {
    ATTRIBUTES
        .iter()
        .filter(|a| a.kind.is_comparable())
        .filter(|a| a.entity == target || target.chain_to(a.entity).is_some())
        .map(|a| a.path())
        .collect()
}

fn lit_order(a: &Literal, b: &Literal) -> Option<Ordering> {
    match (a, b) {
        (Literal::Str(x), Literal::Str(y)) => Some(x.cmp(y)),
        (Literal::Bool(x), Literal::Bool(y)) => Some(x.cmp(y)),
        _ => a.as_f64()?.partial_cmp(&b.as_f64()?),
    }
}

fn random_cmp<R: Rng>(rng: &mut R, target: Entity, sites: &[SiteId]) -> PredicateNode {
    let paths = reachable_paths(target);
    let attr = paths.choose(rng).unwrap().clone();
    let ops = [
        CmpOp::Eq,
        CmpOp::Ne,
        CmpOp::Lt,
        CmpOp::Le,
        CmpOp::Gt,
        CmpOp::Ge,
        CmpOp::Between,
        CmpOp::In,
    ];
    let op = *ops.choose(rng).unwrap();
    let values = match op {
        CmpOp::Between => {
            let mut a = literal_for(rng, &attr, sites);
            let mut b = literal_for(rng, &attr, sites);
            match lit_order(&a, &b) {
                Some(Ordering::Greater) => std::mem::swap(&mut a, &mut b),
                Some(_) => {}
                None => b = a.clone(),
            }
            vec![a, b]
        }
        CmpOp::In => (0..rng.gen_range(1..4))
            .map(|_| literal_for(rng, &attr, sites))
            .collect(),
        _ => vec![literal_for(rng, &attr, sites)],
    };
    PredicateNode::Cmp { attr, op, values }
}

fn random_derived<R: Rng>(rng: &mut R) -> PredicateNode {
    let ops = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge];
    let op = *ops.choose(rng).unwrap();
    if rng.gen() {
        let mut params = Params::new();
        let v = (0..8).map(|_| Literal::Real(feature(rng))).collect();
        params.insert("ref_vector".into(), ParamValue::List(v));
        match rng.gen_range(0..4) {
            0 => {}
            1 => {
                params.insert("views".into(), ParamValue::Scalar(Literal::Str("both".into())));
            }
            2 => {
                params.insert("views".into(), ParamValue::List(vec![Literal::Str("MLO".into())]));
            }
            _ => {
                params.insert("views".into(), ParamValue::Scalar(Literal::Str("CC".into())));
            }
        }
        let value = *[0.15, 0.2, 0.25, 0.3, 0.4, 0.5, 1.0].choose(rng).unwrap();
        PredicateNode::derived(FIND_ONE_LIKE_IT, params, op, value)
    } else {
        let value = rng.gen_range(0..=10) as f64 / 20.0;
        PredicateNode::derived(DENSITY_ASYMMETRY, Params::new(), op, value)
    }
}

/// Random predicate tree of at most `max_depth` levels over paths reachable
/// from `target`, with derived comparisons mixed in.
pub fn random_predicate<R: Rng>(rng: &mut R, target: Entity, max_depth: usize, sites: &[SiteId]) -> PredicateNode {
    if max_depth <= 1 || rng.gen_bool(0.35) {
        return if rng.gen_bool(0.2) {
            random_derived(rng)
        } else {
            random_cmp(rng, target, sites)
        };
    }
    match rng.gen_range(0..5) {
        0 | 1 => PredicateNode::and(
            (0..rng.gen_range(0..4))
                .map(|_| random_predicate(rng, target, max_depth - 1, sites))
                .collect(),
        ),
        2 | 3 => PredicateNode::or(
            (0..rng.gen_range(1..4))
                .map(|_| random_predicate(rng, target, max_depth - 1, sites))
                .collect(),
        ),
        _ => PredicateNode::not(random_predicate(rng, target, max_depth - 1, sites)),
    }
}

/// Random valid query with origin `sites[0]` and hop budget 1.
pub fn random_query<R: Rng>(rng: &mut R, sites: &[SiteId], max_depth: usize) -> FormalQuery {
    let target = *Entity::ALL.choose(rng).unwrap();
    let predicate = random_predicate(rng, target, max_depth, sites);
    let origin = sites.first().cloned().unwrap_or_else(|| SiteId::new("A"));
    let mut q = FormalQuery::new(target, predicate, origin, 1);
    if rng.gen_bool(0.5) {
        let mut all: Vec<String> = ATTRIBUTES
            .iter()
            .filter(|a| a.entity == target || target.chain_to(a.entity).is_some())
            .map(|a| a.path())
            .collect();
        all.shuffle(rng);
        all.truncate(rng.gen_range(1..6));
        q.projection = Projection::Paths(all);
    }
    debug_assert!(q.validate().is_ok(), "{q:?}");
    q
}

/// Shuffles every And/Or child list, recursively.
pub fn permute_children<R: Rng>(node: &PredicateNode, rng: &mut R) -> PredicateNode {
    match node {
        PredicateNode::And { children } | PredicateNode::Or { children } => {
            let mut c: Vec<PredicateNode> = children.iter().map(|c| permute_children(c, rng)).collect();
            c.shuffle(rng);
            if matches!(node, PredicateNode::And { .. }) {
                PredicateNode::and(c)
            } else {
                PredicateNode::or(c)
            }
        }
        PredicateNode::Not { child } => PredicateNode::not(permute_children(child, rng)),
        leaf => leaf.clone(),
    }
}

/// A result row as the reference evaluator sees it: no site column.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct OracleRow {
    pub entity: Entity,
    pub id: String,
    pub fields: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OracleResult {
    /// Sorted by entity, id, fields.
    pub rows: Vec<OracleRow>,
    /// Records whose predicate value was unknown.
    pub skipped: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum K {
    T,
    F,
    U,
}

fn k_and(a: K, b: K) -> K {
    match (a, b) {
        (K::F, _) | (_, K::F) => K::F,
        (K::T, K::T) => K::T,
        _ => K::U,
    }
}

fn k_not(a: K) -> K {
    match a {
        K::T => K::F,
        K::F => K::T,
        K::U => K::U,
    }
}

fn k_or(a: K, b: K) -> K {
    k_not(k_and(k_not(a), k_not(b)))
}

/// Index of every record of the union, by entity and id.
struct Union<'a> {
    patients: HashMap<&'a str, &'a PatientRecord>,
    patient_site: HashMap<&'a str, &'a SiteId>,
    studies: HashMap<&'a str, &'a StudyRecord>,
    images: HashMap<&'a str, &'a ImageRecord>,
    annotations: HashMap<&'a str, &'a AnnotationRecord>,
    images_by_study: HashMap<&'a str, Vec<&'a ImageRecord>>,
}

impl<'a> Union<'a> {
    fn new(d: &'a Dataset) -> Self {
        let mut u = Union {
            patients: HashMap::new(),
            patient_site: HashMap::new(),
            studies: HashMap::new(),
            images: HashMap::new(),
            annotations: HashMap::new(),
            images_by_study: HashMap::new(),
        };
        for (site, records) in &d.sites {
            for r in records {
                match r {
                    Record::Patient(p) => {
                        u.patients.insert(&p.patient_id, p);
                        u.patient_site.insert(&p.patient_id, site);
                    }
                    Record::Study(s) => {
                        u.studies.insert(&s.study_id, s);
                    }
                    Record::Image(i) => {
                        u.images.insert(&i.image_id, i);
                        u.images_by_study.entry(&i.study_id).or_default().push(i);
                    }
                    Record::Annotation(a) => {
                        u.annotations.insert(&a.annotation_id, a);
                    }
                }
            }
        }
        u
    }
}

/// A target record with its resolved ancestors.
#[derive(Default, Clone, Copy)]
struct Chain<'a> {
    patient: Option<&'a PatientRecord>,
    study: Option<&'a StudyRecord>,
    image: Option<&'a ImageRecord>,
    annotation: Option<&'a AnnotationRecord>,
}

impl<'a> Chain<'a> {
    fn value(&self, u: &Union<'a>, path: &str) -> Option<Value> {
        let (entity, field) = path.split_once('.')?;
        match entity {
            "patient" => {
                let p = self.patient?;
                if field == "site_id" {
                    return Some(Value::Str(u.patient_site.get(p.patient_id.as_str())?.to_string()));
                }
                p.field(field)
            }
            "study" => self.study?.field(field),
            "image" => self.image?.field(field),
            "annotation" => self.annotation?.field(field),
            _ => None,
        }
    }

    /// Images whose features describe this record.
    fn images(&self, u: &Union<'a>, target: Entity) -> Vec<&'a ImageRecord> {
        match target {
            Entity::Annotation | Entity::Image => self.image.into_iter().collect(),
            Entity::Study => self
                .study
                .map(|s| u.images_by_study.get(s.study_id.as_str()).cloned().unwrap_or_default())
                .unwrap_or_default(),
            Entity::Patient => self
                .studies(u, target)
                .iter()
                .flat_map(|s| u.images_by_study.get(s.study_id.as_str()).cloned().unwrap_or_default())
                .collect(),
        }
    }

    fn studies(&self, u: &Union<'a>, target: Entity) -> Vec<&'a StudyRecord> {
        match target {
            Entity::Patient => {
                let Some(p) = self.patient else {
                    return Vec::new();
                };
                u.studies
                    .values()
                    .filter(|s| s.patient_id == p.patient_id)
                    .copied()
                    .collect()
            }
            _ => self.study.into_iter().collect(),
        }
    }
}

fn ref_order(v: &Value, l: &Literal) -> Option<Ordering> {
    match (v, l) {
        (Value::Int(a), Literal::Int(b)) => Some(a.cmp(b)),
        (Value::Int(a), Literal::Real(b)) => (*a as f64).partial_cmp(b),
        (Value::Real(a), Literal::Int(b)) => a.partial_cmp(&(*b as f64)),
        (Value::Real(a), Literal::Real(b)) => a.partial_cmp(b),
        (Value::Bool(a), Literal::Bool(b)) => Some(a.cmp(b)),
        (Value::Str(a), Literal::Str(b)) => Some(a.as_str().cmp(b.as_str())),
        (Value::Date(a), Literal::Str(b)) => NaiveDate::parse_from_str(b, "%Y-%m-%d").ok().map(|b| a.cmp(&b)),
        _ => None,
    }
}

fn ref_cmp(v: Option<Value>, op: CmpOp, values: &[Literal]) -> bool {
    let Some(v) = v else { return false };
    let o = |l: &Literal| ref_order(&v, l);
    match op {
        CmpOp::Eq => o(&values[0]) == Some(Ordering::Equal),
        CmpOp::Ne => matches!(o(&values[0]), Some(Ordering::Less | Ordering::Greater)),
        CmpOp::Lt => o(&values[0]) == Some(Ordering::Less),
        CmpOp::Le => matches!(o(&values[0]), Some(Ordering::Less | Ordering::Equal)),
        CmpOp::Gt => o(&values[0]) == Some(Ordering::Greater),
        CmpOp::Ge => matches!(o(&values[0]), Some(Ordering::Greater | Ordering::Equal)),
        CmpOp::Between => {
            matches!(o(&values[0]), Some(Ordering::Greater | Ordering::Equal))
                && matches!(o(&values[1]), Some(Ordering::Less | Ordering::Equal))
        }
        CmpOp::In => values.iter().any(|l| o(l) == Some(Ordering::Equal)),
    }
}

fn num_cmp(x: f64, op: CmpOp, y: f64) -> bool {
    match op {
        CmpOp::Eq => x == y,
        CmpOp::Ne => x != y,
        CmpOp::Lt => x < y,
        CmpOp::Le => x <= y,
        CmpOp::Gt => x > y,
        CmpOp::Ge => x >= y,
        CmpOp::Between | CmpOp::In => false,
    }
}

fn requested_views(params: &Params) -> Vec<View> {
    let words: Vec<&str> = match params.get("views") {
        None => return vec![View::MLO, View::CC],
        Some(ParamValue::Scalar(l)) => l.as_str().into_iter().collect(),
        Some(ParamValue::List(ls)) => ls.iter().filter_map(Literal::as_str).collect(),
    };
    let mut out = Vec::new();
    for w in words {
        match w {
            "MLO" => out.push(View::MLO),
            "CC" => out.push(View::CC),
            "both" => out.extend([View::MLO, View::CC]),
            _ => {}
        }
    }
    out
}

fn derived_value(u: &Union<'_>, chain: &Chain<'_>, target: Entity, provider: &str, params: &Params) -> Option<f64> {
    match provider {
        FIND_ONE_LIKE_IT => {
            let reference: Vec<f64> = match (params.get("ref_vector"), params.get("ref")) {
                (Some(ParamValue::List(v)), _) => v.iter().map(|l| l.as_f64().unwrap()).collect(),
                (None, Some(ParamValue::Scalar(Literal::Str(id)))) => {
                    u.images.get(id.as_str())?.feature_vector.to_vec()
                }
                _ => return None,
            };
            let views = requested_views(params);
            let mut best: Option<f64> = None;
            for img in chain.images(u, target) {
                if !views.contains(&img.view) {
                    continue;
                }
                let d2: f64 = reference
                    .iter()
                    .zip(&img.feature_vector)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let s = 1.0 / (1.0 + d2.sqrt());
                best = Some(match best {
                    Some(b) if b >= s => b,
                    _ => s,
                });
            }
            best
        }
        DENSITY_ASYMMETRY => {
            let mut best: Option<f64> = None;
            for s in chain.studies(u, target) {
                let imgs = u.images_by_study.get(s.study_id.as_str()).cloned().unwrap_or_default();
                for view in [View::MLO, View::CC] {
                    let l = imgs.iter().find(|i| i.view == view && i.laterality == Laterality::L);
                    let r = imgs.iter().find(|i| i.view == view && i.laterality == Laterality::R);
                    if let (Some(l), Some(r)) = (l, r) {
                        let d = (l.mean_density - r.mean_density).abs();
                        best = Some(best.map_or(d, |b: f64| b.max(d)));
                    }
                }
            }
            best
        }
        _ => None,
    }
}

fn eval(node: &PredicateNode, u: &Union<'_>, chain: &Chain<'_>, target: Entity) -> K {
    match node {
        PredicateNode::And { children } => children
            .iter()
            .fold(K::T, |acc, c| k_and(acc, eval(c, u, chain, target))),
        PredicateNode::Or { children } => children
            .iter()
            .fold(K::F, |acc, c| k_or(acc, eval(c, u, chain, target))),
        PredicateNode::Not { child } => k_not(eval(child, u, chain, target)),
        PredicateNode::Cmp { attr, op, values } => {
            if ref_cmp(chain.value(u, attr), *op, values) {
                K::T
            } else {
                K::F
            }
        }
        PredicateNode::Derived {
            provider,
            params,
            op,
            value,
        } => match derived_value(u, chain, target, provider, params) {
            None => K::U,
            Some(x) if num_cmp(x, *op, value.as_f64().unwrap()) => K::T,
            Some(_) => K::F,
        },
    }
}

/// Evaluates `q` by brute force over every record of every site.
pub fn oracle_evaluate(d: &Dataset, q: &FormalQuery) -> OracleResult {
    let u = Union::new(d);
    let mut chains: Vec<(String, Chain<'_>)> = Vec::new();
    let up_from_study = |s: Option<&StudyRecord>| s.and_then(|s| u.patients.get(s.patient_id.as_str()).copied());
    match q.target {
        Entity::Patient => {
            for p in u.patients.values() {
                chains.push((
                    p.patient_id.clone(),
                    Chain {
                        patient: Some(p),
                        ..Chain::default()
                    },
                ));
            }
        }
        Entity::Study => {
            for s in u.studies.values() {
                chains.push((
                    s.study_id.clone(),
                    Chain {
                        patient: up_from_study(Some(s)),
                        study: Some(s),
                        ..Chain::default()
                    },
                ));
            }
        }
        Entity::Image => {
            for i in u.images.values() {
                let study = u.studies.get(i.study_id.as_str()).copied();
                chains.push((
                    i.image_id.clone(),
                    Chain {
                        patient: up_from_study(study),
                        study,
                        image: Some(i),
                        annotation: None,
                    },
                ));
            }
        }
        Entity::Annotation => {
            for a in u.annotations.values() {
                let image = u.images.get(a.image_id.as_str()).copied();
                let study = image.and_then(|i| u.studies.get(i.study_id.as_str()).copied());
                chains.push((
                    a.annotation_id.clone(),
                    Chain {
                        patient: up_from_study(study),
                        study,
                        image,
                        annotation: Some(a),
                    },
                ));
            }
        }
    }
    let projection = q.projection.paths(q.target);
    let mut out = OracleResult::default();
    for (id, chain) in chains {
        match eval(&q.predicate, &u, &chain, q.target) {
            K::T => {}
            K::U => {
                out.skipped += 1;
                continue;
            }
            K::F => continue,
        }
        let fields = projection
            .iter()
            .filter(|p| attribute(p).is_some())
            .filter_map(|p| Some((p.clone(), chain.value(&u, p)?.render())))
            .collect();
        out.rows.push(OracleRow {
            entity: q.target,
            id,
            fields,
        });
    }
    out.rows.sort();
    out
}

/// Converts engine rows to oracle rows, dropping the site column.
pub fn strip_sites<'a>(rows: impl IntoIterator<Item = &'a crate::local::Row>) -> Vec<OracleRow> {
    let mut out: Vec<OracleRow> = rows
        .into_iter()
        .map(|r| OracleRow {
            entity: r.entity,
            id: r.id.clone(),
            fields: r.fields.clone(),
        })
        .collect();
    out.sort();
    out
}

/// Per-site record counts, for failure messages.
pub fn describe(d: &Dataset) -> BTreeMap<String, usize> {
    d.sites.iter().map(|(s, r)| (s.to_string(), r.len())).collect()
}
