//! Clinical workloads: blocked reader allocation for the quality-control
//! study, reader disagreement metrics, the contralateral-cancer cohort and
//! Pearson correlation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use chrono::NaiveDate;
use serde::Serialize;

use crate::local::Row;
use crate::model::{
    AnnotationKind, AnnotationRecord, Author, Diagnosis, Rect, Side, SiteId, StudyRecord, TherapyOutcome,
};

/// xorshift64* generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Xorshift64Star {
    state: u64,
}

impl Xorshift64Star {
    /// The all-zero state is a fixed point, so seed 0 is replaced by a
    /// fixed odd constant.
    pub const ZERO_SEED_REPLACEMENT: u64 = 0x9E37_79B9_7F4A_7C15;

    pub fn new(seed: u64) -> Self {
        Xorshift64Star {
            state: if seed == 0 { Self::ZERO_SEED_REPLACEMENT } else { seed },
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }
}

/// One of the three unordered pairs of readers R1, R2, R3. Serializes as
/// its display form, `R1+R2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ReaderPair {
    R1R2,
    R1R3,
    R2R3,
}

impl ReaderPair {
    pub const ALL: [ReaderPair; 3] = [ReaderPair::R1R2, ReaderPair::R1R3, ReaderPair::R2R3];

    /// Reader positions (0-based) of the pair.
    pub fn positions(self) -> (usize, usize) {
        match self {
            ReaderPair::R1R2 => (0, 1),
            ReaderPair::R1R3 => (0, 2),
            ReaderPair::R2R3 => (1, 2),
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ReaderPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, b) = self.positions();
        write!(f, "R{}+R{}", a + 1, b + 1)
    }
}

impl Serialize for ReaderPair {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AllocationError {
    #[error("patient {0} is already allocated")]
    Duplicate(String),
}

/// Blocked randomization state: every block of three patients receives each
/// reader pair once, in an order shuffled by the seeded generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationState {
    pub readers: [String; 3],
    pub rng_seed: u64,
    rng: Xorshift64Star,
    pair_counts: [u64; 3],
    current_block: Vec<ReaderPair>,
    assignments: Vec<(String, ReaderPair)>,
    assigned: HashSet<String>,
}

/// Result of one allocation, with reader ids resolved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Assignment {
    pub patient_id: String,
    pub pair: ReaderPair,
    pub readers: [String; 2],
}

impl AllocationState {
    pub fn new(seed: u64) -> Self {
        AllocationState::with_readers(seed, ["R1".into(), "R2".into(), "R3".into()])
    }

    pub fn with_readers(seed: u64, readers: [String; 3]) -> Self {
        AllocationState {
            readers,
            rng_seed: seed,
            rng: Xorshift64Star::new(seed),
            pair_counts: [0; 3],
            current_block: Vec::new(),
            assignments: Vec::new(),
            assigned: HashSet::new(),
        }
    }

    fn draw_block(&mut self) {
        let mut block = ReaderPair::ALL.to_vec();
        for i in (1..block.len()).rev() {
            let j = (self.rng.next_u64() % (i as u64 + 1)) as usize;
            block.swap(i, j);
        }
        // Pairs are handed out front to back.
        block.reverse();
        self.current_block = block;
    }

    pub fn allocate(&mut self, patient_id: &str) -> Result<Assignment, AllocationError> {
        if self.assigned.contains(patient_id) {
            return Err(AllocationError::Duplicate(patient_id.to_string()));
        }
        if self.current_block.is_empty() {
            self.draw_block();
        }
        let pair = self.current_block.pop().expect("block refilled");
        self.pair_counts[pair.index()] += 1;
        self.assigned.insert(patient_id.to_string());
        self.assignments.push((patient_id.to_string(), pair));
        let (a, b) = pair.positions();
        Ok(Assignment {
            patient_id: patient_id.to_string(),
            pair,
            readers: [self.readers[a].clone(), self.readers[b].clone()],
        })
    }

    pub fn pair_counts(&self) -> BTreeMap<ReaderPair, u64> {
        ReaderPair::ALL
            .iter()
            .map(|p| (*p, self.pair_counts[p.index()]))
            .collect()
    }

    pub fn assignments(&self) -> &[(String, ReaderPair)] {
        &self.assignments
    }

    /// Pairs left in the active block, next first.
    pub fn current_block(&self) -> Vec<ReaderPair> {
        self.current_block.iter().rev().copied().collect()
    }
}

/// Functional form of [`AllocationState::allocate`].
pub fn allocate_reader_pair(
    mut state: AllocationState,
    patient_id: &str,
) -> Result<(ReaderPair, AllocationState), AllocationError> {
    let a = state.allocate(patient_id)?;
    Ok((a.pair, state))
}

/// Area covered by exactly one of the two region unions, in mm².
pub fn mass_disagreement(a: &[Rect], b: &[Rect]) -> f64 {
    let mut xs: Vec<f64> = a.iter().chain(b).flat_map(|r| [r.x0, r.x1]).collect();
    let mut ys: Vec<f64> = a.iter().chain(b).flat_map(|r| [r.y0, r.y1]).collect();
    for v in [&mut xs, &mut ys] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    let mut area = 0.0;
    for xw in xs.windows(2) {
        for yw in ys.windows(2) {
            let inside = |rs: &[Rect]| rs.iter().any(|r| r.contains_cell(xw[0], yw[0], xw[1], yw[1]));
            if inside(a) != inside(b) {
                area += (xw[1] - xw[0]) * (yw[1] - yw[0]);
            }
        }
    }
    area
}

pub fn microcalc_disagreement(a: u32, b: u32) -> u32 {
    a.abs_diff(b)
}

/// What one author marked on one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Marks {
    pub mass_regions: Vec<Rect>,
    pub microcalc_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairMetrics {
    pub mass_area_mm2: f64,
    pub microcalc_count_diff: u32,
}

impl PairMetrics {
    pub fn between(a: &Marks, b: &Marks) -> Self {
        PairMetrics {
            mass_area_mm2: mass_disagreement(&a.mass_regions, &b.mass_regions),
            microcalc_count_diff: microcalc_disagreement(a.microcalc_count, b.microcalc_count),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisagreementRow {
    pub image_id: String,
    pub reader_a: String,
    pub reader_b: String,
    pub mass_area_mm2: f64,
    pub microcalc_count_diff: u32,
    /// Each reader against the CAD marks, when CAD annotated the image.
    pub vs_cad: Option<(PairMetrics, PairMetrics)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DisagreementReport {
    pub rows: Vec<DisagreementRow>,
}

/// Marks per author on every annotated image.
pub fn marks_by_image<'a>(
    annotations: impl IntoIterator<Item = &'a AnnotationRecord>,
) -> BTreeMap<String, BTreeMap<Author, Marks>> {
    let mut out: BTreeMap<String, BTreeMap<Author, Marks>> = BTreeMap::new();
    for a in annotations {
        let m = out
            .entry(a.image_id.clone())
            .or_default()
            .entry(a.author.clone())
            .or_default();
        match a.kind {
            AnnotationKind::Mass => m.mass_regions.extend(a.regions.iter().copied()),
            AnnotationKind::MicrocalcificationCluster => m.microcalc_count += a.microcalc_count.unwrap_or(0),
        }
    }
    out
}

/// One row per image and unordered pair of radiologists who annotated it.
pub fn disagreement_report<'a>(annotations: impl IntoIterator<Item = &'a AnnotationRecord>) -> DisagreementReport {
    let mut rows = Vec::new();
    for (image_id, by_author) in marks_by_image(annotations) {
        let cad = by_author.get(&Author::Cad);
        let readers: Vec<(&String, &Marks)> = by_author
            .iter()
            .filter_map(|(a, m)| match a {
                Author::Radiologist(id) => Some((id, m)),
                Author::Cad => None,
            })
            .collect();
        for (i, (ra, ma)) in readers.iter().enumerate() {
            for (rb, mb) in &readers[i + 1..] {
                let p = PairMetrics::between(ma, mb);
                rows.push(DisagreementRow {
                    image_id: image_id.clone(),
                    reader_a: (*ra).clone(),
                    reader_b: (*rb).clone(),
                    mass_area_mm2: p.mass_area_mm2,
                    microcalc_count_diff: p.microcalc_count_diff,
                    vs_cad: cad.map(|c| (PairMetrics::between(ma, c), PairMetrics::between(mb, c))),
                });
            }
        }
    }
    DisagreementReport { rows }
}

/// Rebuilds annotations from result rows that project every `annotation.*`
/// path. Rows that lack a required field are skipped.
pub fn annotations_from_rows(rows: &[Row]) -> Vec<AnnotationRecord> {
    rows.iter().filter_map(annotation_from_row).collect()
}

fn annotation_from_row(row: &Row) -> Option<AnnotationRecord> {
    let get = |k: &str| {
        row.fields
            .iter()
            .find(|(p, _)| p == &format!("annotation.{k}"))
            .map(|(_, v)| v.as_str())
    };
    fn json<T: serde::de::DeserializeOwned>(v: Option<&str>) -> Option<T> {
        serde_json::from_str(v?).ok()
    }
    fn word<T: serde::de::DeserializeOwned>(v: Option<&str>) -> Option<T> {
        serde_json::from_value(serde_json::Value::String(v?.into())).ok()
    }
    let author = match get("author")? {
        "cad" => Author::Cad,
        other => Author::Radiologist(other.strip_prefix("radiologist:")?.to_string()),
    };
    let regions: Vec<[f64; 4]> = json(get("regions")).unwrap_or_default();
    Some(AnnotationRecord {
        annotation_id: get("annotation_id").unwrap_or(&row.id).to_string(),
        image_id: get("image_id")?.to_string(),
        author,
        kind: word(get("kind"))?,
        regions: regions.into_iter().map(Rect::from).collect(),
        microcalc_count: json(get("microcalc_count")),
        session_length_min: json(get("session_length_min")),
        serial_order: json(get("serial_order")),
        reading: word(get("reading")),
        author_experience_years: json(get("author_experience_years")),
    })
}

/// Per-reading inputs for correlating reader disagreement with CAD against
/// reader circumstances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReadingRow {
    pub image_id: String,
    pub reader: String,
    pub mass_area_vs_cad_mm2: f64,
    pub microcalc_diff_vs_cad: u32,
    pub experience_years: Option<i64>,
    pub session_length_min: Option<f64>,
    pub serial_order: Option<u32>,
    pub reading: Option<String>,
}

/// One row per (image, radiologist) on images CAD also annotated. Reading
/// circumstances come from the radiologist's first annotation on the image.
pub fn reading_rows(annotations: &[AnnotationRecord]) -> Vec<ReadingRow> {
    let marks = marks_by_image(annotations);
    let mut out = Vec::new();
    for (image_id, by_author) in &marks {
        let Some(cad) = by_author.get(&Author::Cad) else {
            continue;
        };
        for (author, m) in by_author {
            let Author::Radiologist(reader) = author else {
                continue;
            };
            let first = annotations
                .iter()
                .filter(|a| &a.image_id == image_id && &a.author == author)
                .min_by(|x, y| x.annotation_id.cmp(&y.annotation_id));
            let p = PairMetrics::between(m, cad);
            out.push(ReadingRow {
                image_id: image_id.clone(),
                reader: reader.clone(),
                mass_area_vs_cad_mm2: p.mass_area_mm2,
                microcalc_diff_vs_cad: p.microcalc_count_diff,
                experience_years: first.and_then(|a| a.author_experience_years),
                session_length_min: first.and_then(|a| a.session_length_min),
                serial_order: first.and_then(|a| a.serial_order),
                reading: first.and_then(|a| a.reading).map(|r| format!("{r:?}").to_lowercase()),
            });
        }
    }
    out
}

/// Minimal study view needed for the cohort, from a local record or a
/// federated result row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortStudy {
    pub site_id: SiteId,
    pub patient_id: String,
    pub study_date: NaiveDate,
    pub diagnosis: Option<Diagnosis>,
    pub laterality: Option<Side>,
    pub therapy_outcome: Option<TherapyOutcome>,
}

impl CohortStudy {
    pub fn from_record(site: &SiteId, s: &StudyRecord) -> Self {
        CohortStudy {
            site_id: site.clone(),
            patient_id: s.patient_id.clone(),
            study_date: s.study_date,
            diagnosis: s.diagnosis,
            laterality: s.diagnosed_laterality,
            therapy_outcome: s.therapy_outcome,
        }
    }

    /// Reads a study row projected with at least `study.patient_id` and
    /// `study.study_date`.
    pub fn from_row(row: &Row) -> Option<Self> {
        let get = |k: &str| row.fields.iter().find(|(p, _)| p == k).map(|(_, v)| v.as_str());
        fn enum_of<T: serde::de::DeserializeOwned>(v: Option<&str>) -> Option<T> {
            serde_json::from_value(serde_json::Value::String(v?.into())).ok()
        }
        Some(CohortStudy {
            site_id: row.site_id.clone(),
            patient_id: get("study.patient_id")?.to_string(),
            study_date: get("study.study_date")?.parse().ok()?,
            diagnosis: enum_of(get("study.diagnosis")),
            laterality: enum_of(get("study.diagnosed_laterality")),
            therapy_outcome: enum_of(get("study.therapy_outcome")),
        })
    }

    fn cancer_side(&self) -> Option<Side> {
        (self.diagnosis == Some(Diagnosis::Cancer))
            .then_some(self.laterality)
            .flatten()
    }
}

/// Paths a study query must project for [`CohortStudy::from_row`].
pub const COHORT_PATHS: [&str; 5] = [
    "study.patient_id",
    "study.study_date",
    "study.diagnosis",
    "study.diagnosed_laterality",
    "study.therapy_outcome",
];

/// Patients with a successfully treated cancer followed, on a strictly later
/// date, by a cancer in the other breast. Sorted by `(site, patient_id)`.
pub fn contralateral_cohort<'a>(studies: impl IntoIterator<Item = &'a CohortStudy>) -> Vec<(SiteId, String)> {
    #[derive(Default)]
    struct Acc {
        earliest_success: [Option<NaiveDate>; 2],
        latest_cancer: [Option<NaiveDate>; 2],
    }
    let side = |s: Side| s as usize;
    let mut by_patient: BTreeMap<(SiteId, String), Acc> = BTreeMap::new();
    for s in studies {
        let Some(lat) = s.cancer_side() else { continue };
        let acc = by_patient.entry((s.site_id.clone(), s.patient_id.clone())).or_default();
        let latest = &mut acc.latest_cancer[side(lat)];
        *latest = Some(latest.map_or(s.study_date, |d| d.max(s.study_date)));
        if s.therapy_outcome == Some(TherapyOutcome::Successful) {
            let first = &mut acc.earliest_success[side(lat)];
            *first = Some(first.map_or(s.study_date, |d| d.min(s.study_date)));
        }
    }
    by_patient
        .into_iter()
        .filter(|(_, acc)| {
            [Side::Left, Side::Right].into_iter().any(|x| {
                match (acc.earliest_success[side(x)], acc.latest_cancer[side(x.opposite())]) {
                    (Some(first), Some(later)) => later > first,
                    _ => false,
                }
            })
        })
        .map(|(k, _)| k)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CorrelationError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two observations")]
    TooFew,
    #[error("a series has zero variance; correlation undefined")]
    ZeroVariance,
    #[error("non-finite observation")]
    NonFinite,
}

/// Sample Pearson correlation coefficient.
pub fn pearson_correlation(xs: &[f64], ys: &[f64]) -> Result<f64, CorrelationError> {
    if xs.len() != ys.len() {
        return Err(CorrelationError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(CorrelationError::TooFew);
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(CorrelationError::NonFinite);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CorrelationError::ZeroVariance);
    }
    // sqrt(s * s) == s exactly, so perfectly (anti)correlated series give exactly ±1.
    let denom = match (sxx * syy).sqrt() {
        d if d.is_finite() && d > 0.0 => d,
        _ => sxx.sqrt() * syy.sqrt(),
    };
    Ok((sxy / denom).clamp(-1.0, 1.0))
}

/// Largest left/right mean-density difference per patient, from image rows
/// projected with `study.patient_id`, `image.study_id`, `image.laterality`,
/// `image.view` and `image.mean_density`. Keyed by `(site, patient_id)`.
pub fn patient_asymmetry(image_rows: &[Row]) -> BTreeMap<(SiteId, String), f64> {
    type Slot = (SiteId, String, String, String);
    let mut sides: BTreeMap<Slot, [Option<f64>; 2]> = BTreeMap::new();
    for r in image_rows {
        let get = |k: &str| r.fields.iter().find(|(p, _)| p == k).map(|(_, v)| v.clone());
        let (Some(pid), Some(study), Some(lat), Some(view), Some(d)) = (
            get("study.patient_id"),
            get("image.study_id"),
            get("image.laterality"),
            get("image.view"),
            get("image.mean_density").and_then(|d| d.parse::<f64>().ok()),
        ) else {
            continue;
        };
        let idx = match lat.as_str() {
            "L" => 0,
            "R" => 1,
            _ => continue,
        };
        sides.entry((r.site_id.clone(), pid, study, view)).or_default()[idx] = Some(d);
    }
    let mut out: BTreeMap<(SiteId, String), f64> = BTreeMap::new();
    for ((site, pid, _, _), pair) in sides {
        if let [Some(l), Some(r)] = pair {
            let d = (l - r).abs();
            let e = out.entry((site, pid)).or_insert(d);
            *e = e.max(d);
        }
    }
    out
}

/// Paths an image query must project for [`patient_asymmetry`].
pub const ASYMMETRY_PATHS: [&str; 5] = [
    "study.patient_id",
    "image.study_id",
    "image.laterality",
    "image.view",
    "image.mean_density",
];

/// Serializes rows as RFC 4180 CSV with a header row.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, csv::Error> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Flat CSV form of a disagreement row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisagreementCsvRow {
    pub image_id: String,
    pub reader_a: String,
    pub reader_b: String,
    pub mass_area_mm2: f64,
    pub microcalc_count_diff: u32,
    pub a_vs_cad_mass_area_mm2: Option<f64>,
    pub a_vs_cad_microcalc_diff: Option<u32>,
    pub b_vs_cad_mass_area_mm2: Option<f64>,
    pub b_vs_cad_microcalc_diff: Option<u32>,
}

impl DisagreementReport {
    pub fn csv_rows(&self) -> Vec<DisagreementCsvRow> {
        self.rows
            .iter()
            .map(|r| DisagreementCsvRow {
                image_id: r.image_id.clone(),
                reader_a: r.reader_a.clone(),
                reader_b: r.reader_b.clone(),
                mass_area_mm2: r.mass_area_mm2,
                microcalc_count_diff: r.microcalc_count_diff,
                a_vs_cad_mass_area_mm2: r.vs_cad.map(|(a, _)| a.mass_area_mm2),
                a_vs_cad_microcalc_diff: r.vs_cad.map(|(a, _)| a.microcalc_count_diff),
                b_vs_cad_mass_area_mm2: r.vs_cad.map(|(_, b)| b.mass_area_mm2),
                b_vs_cad_microcalc_diff: r.vs_cad.map(|(_, b)| b.microcalc_count_diff),
            })
            .collect()
    }

    /// Distinct readers appearing in the report.
    pub fn readers(&self) -> BTreeSet<&str> {
        self.rows
            .iter()
            .flat_map(|r| [r.reader_a.as_str(), r.reader_b.as_str()])
            .collect()
    }
}

#[cfg(test)]
mod tests;
