use super::*;
use crate::model::{AnnotationRecord, ImageRecord, Laterality, PatientRecord, Reading, Record, SiteStore, View};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use proptest::prelude::*;

#[test]
fn xorshift_matches_reference_outputs() {
    // Computed independently with arbitrary-precision integers masked to 64 bits.
    let mut g = Xorshift64Star::new(1);
    assert_eq!(g.next_u64(), 0x47e4ce4b896cdd1d);
    assert_eq!(g.next_u64(), 0xabcfa6a8e079651d);
    assert_eq!(g.next_u64(), 0xb9d10d8feb731f57);
}

#[test]
fn zero_seed_is_replaced() {
    assert_eq!(
        Xorshift64Star::new(0),
        Xorshift64Star::new(Xorshift64Star::ZERO_SEED_REPLACEMENT)
    );
}

#[test]
fn seed_42_golden_sequence() {
    let mut s = AllocationState::new(42);
    let pairs: Vec<ReaderPair> = (0..9).map(|i| s.allocate(&format!("P{i}")).unwrap().pair).collect();
    use ReaderPair::*;
    assert_eq!(pairs, [R1R3, R2R3, R1R2, R1R2, R1R3, R2R3, R1R2, R1R3, R2R3]);
}

#[test]
fn nine_patients_three_each() {
    for seed in [0, 1, 42, u64::MAX] {
        let mut s = AllocationState::new(seed);
        for i in 0..9 {
            s.allocate(&format!("P{i}")).unwrap();
        }
        assert!(s.pair_counts().values().all(|c| *c == 3));
    }
}

#[test]
fn seven_patients_three_two_two() {
    let mut s = AllocationState::new(7);
    for i in 0..7 {
        s.allocate(&format!("P{i}")).unwrap();
    }
    let mut counts: Vec<u64> = s.pair_counts().into_values().collect();
    counts.sort();
    assert_eq!(counts, [2, 2, 3]);
}

#[test]
fn duplicate_patient_rejected() {
    let mut s = AllocationState::new(3);
    let first = s.allocate("P1").unwrap();
    assert_eq!(s.allocate("P1"), Err(AllocationError::Duplicate("P1".into())));
    assert_eq!(s.assignments().len(), 1);
    assert_ne!(first.readers[0], first.readers[1]);
    let (_, s) = allocate_reader_pair(s, "P2").unwrap();
    assert!(allocate_reader_pair(s, "P2").is_err());
}

#[test]
fn allocation_is_reproducible() {
    let run = |seed| {
        let mut s = AllocationState::new(seed);
        (0..50)
            .map(|i| s.allocate(&i.to_string()).unwrap().pair)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(99), run(99));
    assert_ne!(run(99), run(100));
}

proptest! {
    #[test]
    fn allocation_balance(seed in any::<u64>(), n in 1usize..200) {
        let mut s = AllocationState::new(seed);
        for i in 0..n {
            let a = s.allocate(&format!("P{i}")).unwrap();
            prop_assert_ne!(&a.readers[0], &a.readers[1]);
            let c: Vec<u64> = s.pair_counts().into_values().collect();
            prop_assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
        }
    }
}

/// Counts 1 mm cells covered by exactly one side.
fn raster_oracle(a: &[Rect], b: &[Rect]) -> f64 {
    let covered = |rs: &[Rect], x: i64, y: i64| {
        rs.iter()
            .any(|r| r.x0 as i64 <= x && x < r.x1 as i64 && r.y0 as i64 <= y && y < r.y1 as i64)
    };
    let mut n = 0;
    for x in -1..41 {
        for y in -1..41 {
            if covered(a, x, y) != covered(b, x, y) {
                n += 1;
            }
        }
    }
    n as f64
}

fn rect() -> impl Strategy<Value = Rect> {
    (0i32..30, 0i32..30, 1i32..10, 1i32..10)
        .prop_map(|(x, y, w, h)| Rect::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64))
}

#[test]
fn mass_examples() {
    let a = [Rect::new(0.0, 0.0, 10.0, 10.0)];
    let b = [Rect::new(5.0, 0.0, 15.0, 10.0)];
    assert_eq!(mass_disagreement(&a, &b), 100.0);
    assert_eq!(raster_oracle(&a, &b), 100.0);
    assert_eq!(mass_disagreement(&a, &a), 0.0);
    assert_eq!(mass_disagreement(&[], &[]), 0.0);
    assert_eq!(microcalc_disagreement(3, 5), 2);
    assert_eq!(microcalc_disagreement(5, 3), 2);
}

proptest! {
    #[test]
    fn mass_metric_matches_raster(a in prop::collection::vec(rect(), 0..8), b in prop::collection::vec(rect(), 0..8)) {
        let d = mass_disagreement(&a, &b);
        prop_assert_eq!(d, raster_oracle(&a, &b));
        prop_assert_eq!(d, mass_disagreement(&b, &a));
        prop_assert_eq!(mass_disagreement(&a, &a), 0.0);
    }
}

fn cs(
    pid: &str,
    date: &str,
    diag: Option<Diagnosis>,
    side: Option<Side>,
    outcome: Option<TherapyOutcome>,
) -> CohortStudy {
    CohortStudy {
        site_id: SiteId::new("A"),
        patient_id: pid.into(),
        study_date: date.parse().unwrap(),
        diagnosis: diag,
        laterality: side,
        therapy_outcome: outcome,
    }
}

const C: Option<Diagnosis> = Some(Diagnosis::Cancer);
const OK: Option<TherapyOutcome> = Some(TherapyOutcome::Successful);

#[test]
fn cohort_definitional_cases() {
    let studies = vec![
        cs("P1", "2001-01-01", C, Some(Side::Left), OK),
        cs("P1", "2004-01-01", C, Some(Side::Right), None),
        cs("P2", "2001-01-01", C, Some(Side::Left), OK),
        cs("P2", "2004-01-01", C, Some(Side::Left), None),
        cs("P3", "2001-01-01", C, Some(Side::Left), OK),
        cs("P3", "2001-01-01", C, Some(Side::Right), None),
        cs(
            "P4",
            "2001-01-01",
            C,
            Some(Side::Left),
            Some(TherapyOutcome::Unsuccessful),
        ),
        cs("P4", "2004-01-01", C, Some(Side::Right), None),
        cs("P5", "2004-01-01", C, Some(Side::Left), OK),
        cs("P5", "2001-01-01", C, Some(Side::Right), None),
    ];
    let ids: Vec<String> = contralateral_cohort(&studies).into_iter().map(|(_, p)| p).collect();
    assert_eq!(ids, ["P1"]);
}

/// Every ordered pair of studies of the same patient.
fn cohort_oracle(studies: &[CohortStudy]) -> Vec<(SiteId, String)> {
    let mut out = BTreeSet::new();
    for a in studies {
        for b in studies {
            if a.site_id == b.site_id
                && a.patient_id == b.patient_id
                && a.diagnosis == C
                && b.diagnosis == C
                && a.therapy_outcome == OK
                && b.study_date > a.study_date
                && a.laterality.is_some()
                && b.laterality == a.laterality.map(Side::opposite)
            {
                out.insert((a.site_id.clone(), a.patient_id.clone()));
            }
        }
    }
    out.into_iter().collect()
}

fn cohort_study() -> impl Strategy<Value = CohortStudy> {
    (0u8..2, 0u8..40, 0i64..3000, 0u8..3, any::<bool>(), 0u8..3).prop_map(|(site, p, day, diag, left, out)| {
        let diagnosis = [Some(Diagnosis::Normal), Some(Diagnosis::Benign), C][diag as usize];
        CohortStudy {
            site_id: SiteId::new(["A", "B"][site as usize]),
            patient_id: format!("P{p}"),
            study_date: NaiveDate::from_ymd_opt(2000, 1, 1).unwrap() + chrono::Days::new(day as u64),
            diagnosis,
            laterality: (diagnosis == C).then_some(if left { Side::Left } else { Side::Right }),
            therapy_outcome: [None, OK, Some(TherapyOutcome::Unsuccessful)][out as usize],
        }
    })
}

proptest! {
    #[test]
    fn cohort_matches_quadratic_oracle(studies in prop::collection::vec(cohort_study(), 0..120)) {
        prop_assert_eq!(contralateral_cohort(&studies), cohort_oracle(&studies));
    }
}

#[test]
fn cohort_from_rows() {
    let row = Row {
        entity: crate::model::Entity::Study,
        id: "S1".into(),
        site_id: SiteId::new("B"),
        fields: vec![
            ("study.patient_id".into(), "P1".into()),
            ("study.study_date".into(), "2001-02-03".into()),
            ("study.diagnosis".into(), "cancer".into()),
            ("study.diagnosed_laterality".into(), "left".into()),
            ("study.therapy_outcome".into(), "successful".into()),
        ],
    };
    let s = CohortStudy::from_row(&row).unwrap();
    assert_eq!(s.laterality, Some(Side::Left));
    assert_eq!(s.therapy_outcome, OK);
    assert_eq!(s.site_id, SiteId::new("B"));
}

fn exact(v: f64) -> BigRational {
    BigRational::from_float(v).unwrap()
}

/// Pearson r from exact rational sums; only the final square root is rounded.
fn pearson_oracle(xs: &[f64], ys: &[f64]) -> f64 {
    let n = BigRational::from_integer(BigInt::from(xs.len()));
    let xs: Vec<BigRational> = xs.iter().map(|v| exact(*v)).collect();
    let ys: Vec<BigRational> = ys.iter().map(|v| exact(*v)).collect();
    let mx = xs.iter().fold(BigRational::zero(), |a, b| a + b) / &n;
    let my = ys.iter().fold(BigRational::zero(), |a, b| a + b) / &n;
    let (mut sxy, mut sxx, mut syy) = (BigRational::zero(), BigRational::zero(), BigRational::zero());
    for (x, y) in xs.iter().zip(&ys) {
        let dx = x - &mx;
        let dy = y - &my;
        sxy += &dx * &dy;
        sxx += &dx * &dx;
        syy += &dy * &dy;
    }
    let r2 = (&sxy * &sxy) / (sxx * syy);
    let r = r2.to_f64().unwrap().sqrt();
    if sxy.is_negative() {
        -r
    } else {
        r
    }
}

#[test]
fn pearson_examples() {
    assert!((pearson_correlation(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((pearson_correlation(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
    let r = pearson_correlation(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    assert!((r - pearson_oracle(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0])).abs() < 1e-12);
    assert!((r - 0.8).abs() < 1e-12);
}

#[test]
fn pearson_errors() {
    assert_eq!(pearson_correlation(&[1.0], &[1.0]), Err(CorrelationError::TooFew));
    assert_eq!(
        pearson_correlation(&[1.0, 2.0], &[1.0]),
        Err(CorrelationError::LengthMismatch(2, 1))
    );
    assert_eq!(
        pearson_correlation(&[1.0, 1.0], &[1.0, 2.0]),
        Err(CorrelationError::ZeroVariance)
    );
    assert_eq!(
        pearson_correlation(&[1.0, f64::NAN], &[1.0, 2.0]),
        Err(CorrelationError::NonFinite)
    );
}

proptest! {
    #[test]
    fn pearson_matches_exact_evaluation(
        pairs in prop::collection::vec((-1000.0f64..1000.0, -1000.0f64..1000.0), 3..60)
    ) {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let r = pearson_correlation(&xs, &ys).unwrap();
        prop_assert!((r - pearson_oracle(&xs, &ys)).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|v| -v).collect();
        prop_assert_eq!(pearson_correlation(&xs, &xs).unwrap(), 1.0);
        prop_assert_eq!(pearson_correlation(&xs, &neg).unwrap(), -1.0);
    }
}

fn qc_store() -> SiteStore {
    let mut s = SiteStore::new(SiteId::new("A"));
    let ann = |id: &str, author: Author, kind: AnnotationKind, regions: Vec<Rect>, count: Option<u32>| {
        Record::Annotation(AnnotationRecord {
            annotation_id: id.into(),
            image_id: "I1".into(),
            author,
            kind,
            regions,
            microcalc_count: count,
            session_length_min: Some(30.0),
            serial_order: Some(1),
            reading: Some(Reading::First),
            author_experience_years: Some(5),
        })
    };
    let r = |id: &str| Author::Radiologist(id.into());
    let report = s.ingest_batch([
        Record::Patient(PatientRecord {
            patient_id: "P1".into(),
            age_years: 60,
            children_count: 0,
            age_first_pregnancy: None,
            age_last_pregnancy: None,
            hrt: false,
            hrt_start: None,
            site_id: SiteId::default(),
        }),
        Record::Study(StudyRecord {
            study_id: "S1".into(),
            patient_id: "P1".into(),
            study_date: "2004-01-01".parse().unwrap(),
            reader_ids: vec!["R1".into(), "R2".into()],
            diagnosis: None,
            diagnosed_laterality: None,
            therapy_outcome: None,
        }),
        Record::Image(ImageRecord {
            image_id: "I1".into(),
            study_id: "S1".into(),
            laterality: Laterality::L,
            view: View::MLO,
            breast_area_mm2: 1.0,
            mean_density: 0.5,
            feature_vector: [0.0; 8],
        }),
        ann(
            "A1",
            r("R1"),
            AnnotationKind::Mass,
            vec![Rect::new(0.0, 0.0, 10.0, 10.0)],
            None,
        ),
        ann(
            "A2",
            r("R2"),
            AnnotationKind::Mass,
            vec![Rect::new(5.0, 0.0, 15.0, 10.0)],
            None,
        ),
        ann(
            "A3",
            r("R1"),
            AnnotationKind::MicrocalcificationCluster,
            vec![Rect::new(0.0, 0.0, 1.0, 1.0)],
            Some(3),
        ),
        ann(
            "A4",
            r("R2"),
            AnnotationKind::MicrocalcificationCluster,
            vec![Rect::new(0.0, 0.0, 1.0, 1.0)],
            Some(5),
        ),
        ann(
            "A5",
            Author::Cad,
            AnnotationKind::Mass,
            vec![Rect::new(0.0, 0.0, 10.0, 10.0)],
            None,
        ),
    ]);
    assert!(report.rejected.is_empty(), "{report:?}");
    s
}

#[test]
fn disagreement_report_rows() {
    let store = qc_store();
    let rep = disagreement_report(store.annotations());
    assert_eq!(rep.rows.len(), 1);
    let row = &rep.rows[0];
    assert_eq!((row.reader_a.as_str(), row.reader_b.as_str()), ("R1", "R2"));
    assert_eq!(row.mass_area_mm2, 100.0);
    assert_eq!(row.microcalc_count_diff, 2);
    let (a, b) = row.vs_cad.unwrap();
    assert_eq!((a.mass_area_mm2, a.microcalc_count_diff), (0.0, 3));
    assert_eq!((b.mass_area_mm2, b.microcalc_count_diff), (100.0, 5));
    let csv = to_csv(&rep.csv_rows()).unwrap();
    assert!(csv.starts_with("image_id,reader_a,reader_b,mass_area_mm2,"));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn annotations_survive_result_rows() {
    use crate::local::{run_local, ProviderRegistry};
    use crate::query::FormalQuery;
    let store = qc_store();
    let q = FormalQuery::new(
        crate::model::Entity::Annotation,
        crate::query::PredicateNode::always(),
        SiteId::new("A"),
        0,
    );
    let rs = run_local(&q, &store, &ProviderRegistry::standard(), crate::analyser::QueryId(1)).unwrap();
    let back = annotations_from_rows(&rs.rows);
    let orig: Vec<AnnotationRecord> = store.annotations().cloned().collect();
    assert_eq!(back, orig);
    assert_eq!(disagreement_report(&back), disagreement_report(&orig));
}

#[test]
fn reading_rows_carry_circumstances() {
    let store = qc_store();
    let anns: Vec<AnnotationRecord> = store.annotations().cloned().collect();
    let rows = reading_rows(&anns);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].reader, "R1");
    assert_eq!(rows[0].experience_years, Some(5));
    assert_eq!(rows[0].reading.as_deref(), Some("first"));
}

#[test]
fn csv_quotes_per_rfc4180() {
    #[derive(Serialize)]
    struct R {
        a: String,
    }
    let out = to_csv(&[R { a: "x,\"y\"".into() }]).unwrap();
    assert_eq!(out, "a\r\n\"x,\"\"y\"\"\"\r\n");
}

#[test]
fn asymmetry_from_rows() {
    let row = |id: &str, study: &str, lat: &str, view: &str, d: &str| Row {
        entity: crate::model::Entity::Image,
        id: id.into(),
        site_id: SiteId::new("A"),
        fields: vec![
            ("study.patient_id".into(), "P1".into()),
            ("image.study_id".into(), study.into()),
            ("image.laterality".into(), lat.into()),
            ("image.view".into(), view.into()),
            ("image.mean_density".into(), d.into()),
        ],
    };
    let rows = [
        row("I1", "S1", "L", "MLO", "0.5"),
        row("I2", "S1", "R", "MLO", "0.25"),
        row("I3", "S2", "L", "CC", "0.9"),
    ];
    let m = patient_asymmetry(&rows);
    assert_eq!(m.get(&(SiteId::new("A"), "P1".to_string())), Some(&0.25));
}
