//! Derived-data providers: deterministic stand-ins for CAD-style algorithms.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::model::{Entity, ImageRecord, Laterality, SiteStore, StudyRecord, View, FEATURE_LEN};
use crate::query::{Literal, ParamValue, Params, PredicateNode};

pub const FIND_ONE_LIKE_IT: &str = "find_one_like_it";
pub const DENSITY_ASYMMETRY: &str = "density_asymmetry";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("provider {provider}: {message}")]
pub struct ProviderError {
    pub provider: String,
    pub message: String,
}

/// The record a provider is evaluated against, with access to the store it
/// came from.
#[derive(Clone, Copy)]
pub struct RecordContext<'a> {
    pub store: &'a SiteStore,
    pub entity: Entity,
    pub id: &'a str,
}

impl<'a> RecordContext<'a> {
    pub fn new(store: &'a SiteStore, entity: Entity, id: &'a str) -> Self {
        RecordContext { store, entity, id }
    }

    /// Images associated with the record: an image itself, the images of a
    /// study or of every study of a patient, the image an annotation marks.
    pub fn images(&self) -> Vec<&'a ImageRecord> {
        let s = self.store;
        match self.entity {
            Entity::Image => s.image(self.id).into_iter().collect(),
            Entity::Study => s.images_of(self.id).collect(),
            Entity::Patient => s.studies_of(self.id).flat_map(|st| s.images_of(&st.study_id)).collect(),
            Entity::Annotation => s
                .annotation(self.id)
                .and_then(|a| s.image(&a.image_id))
                .into_iter()
                .collect(),
        }
    }

    /// Studies associated with the record, by the same rules as [`images`](Self::images).
    pub fn studies(&self) -> Vec<&'a StudyRecord> {
        let s = self.store;
        match self.entity {
            Entity::Study => s.study(self.id).into_iter().collect(),
            Entity::Patient => s.studies_of(self.id).collect(),
            Entity::Image => s
                .image(self.id)
                .and_then(|i| s.study(&i.study_id))
                .into_iter()
                .collect(),
            Entity::Annotation => s
                .annotation(self.id)
                .and_then(|a| s.image(&a.image_id))
                .and_then(|i| s.study(&i.study_id))
                .into_iter()
                .collect(),
        }
    }
}

/// A pure function from a record context and parameters to a real.
/// `Ok(None)` means the value is undefined for this record.
pub trait DerivedProvider: Send + Sync {
    fn evaluate(&self, ctx: &RecordContext<'_>, params: &Params) -> Result<Option<f64>, ProviderError>;
}

#[derive(Clone, Default)]
pub struct ProviderRegistry {
    providers: BTreeMap<String, Arc<dyn DerivedProvider>>,
}

impl fmt::Debug for ProviderRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.providers.keys()).finish()
    }
}

impl ProviderRegistry {
    pub fn empty() -> Self {
        ProviderRegistry::default()
    }

    /// Registry holding `find_one_like_it` and `density_asymmetry`.
    pub fn standard() -> Self {
        let mut r = ProviderRegistry::empty();
        r.register(FIND_ONE_LIKE_IT, Arc::new(FindOneLikeIt));
        r.register(DENSITY_ASYMMETRY, Arc::new(DensityAsymmetry));
        r
    }

    pub fn register(&mut self, id: &str, provider: Arc<dyn DerivedProvider>) {
        self.providers.insert(id.to_string(), provider);
    }

    pub fn get(&self, id: &str) -> Option<&Arc<dyn DerivedProvider>> {
        self.providers.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.providers.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.providers.keys().map(String::as_str)
    }
}

fn perr(provider: &str, message: impl Into<String>) -> ProviderError {
    ProviderError {
        provider: provider.to_string(),
        message: message.into(),
    }
}

/// Similarity of two feature vectors: `1 / (1 + euclidean distance)`.
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    1.0 / (1.0 + d2.sqrt())
}

/// Best match of the reference vector against the record's images in the
/// requested views.
///
/// Params: `ref_vector` (8 reals) or `ref` (an image id in this store), and
/// optional `views` (list of `MLO`/`CC`, or the scalar `both`). A `ref` that
/// does not resolve here makes the value undefined.
pub struct FindOneLikeIt;

impl FindOneLikeIt {
    fn reference(ctx: &RecordContext<'_>, params: &Params) -> Result<Option<Vec<f64>>, ProviderError> {
        if let Some(p) = params.get("ref_vector") {
            let ParamValue::List(items) = p else {
                return Err(perr(FIND_ONE_LIKE_IT, "ref_vector must be a list"));
            };
            let v: Option<Vec<f64>> = items.iter().map(Literal::as_f64).collect();
            return match v {
                Some(v) if v.len() == FEATURE_LEN => Ok(Some(v)),
                _ => Err(perr(
                    FIND_ONE_LIKE_IT,
                    format!("ref_vector must hold {FEATURE_LEN} numbers"),
                )),
            };
        }
        match params.get("ref") {
            Some(ParamValue::Scalar(Literal::Str(id))) => {
                Ok(ctx.store.image(id).map(|img| img.feature_vector.to_vec()))
            }
            Some(_) => Err(perr(FIND_ONE_LIKE_IT, "ref must be an image id")),
            None => Err(perr(FIND_ONE_LIKE_IT, "needs `ref` or `ref_vector`")),
        }
    }
}

/// Parses the `views` parameter; absent means both views.
pub fn parse_views(provider: &str, params: &Params) -> Result<Vec<View>, ProviderError> {
    let words: Vec<&Literal> = match params.get("views") {
        None => return Ok(vec![View::MLO, View::CC]),
        Some(ParamValue::Scalar(l)) => vec![l],
        Some(ParamValue::List(ls)) => ls.iter().collect(),
    };
    let mut views = Vec::new();
    for w in words {
        match w.as_str() {
            Some("MLO") => views.push(View::MLO),
            Some("CC") => views.push(View::CC),
            Some("both") => views.extend([View::MLO, View::CC]),
            _ => return Err(perr(provider, format!("unknown view {w:?}"))),
        }
    }
    Ok(views)
}

impl DerivedProvider for FindOneLikeIt {
    fn evaluate(&self, ctx: &RecordContext<'_>, params: &Params) -> Result<Option<f64>, ProviderError> {
        let views = parse_views(FIND_ONE_LIKE_IT, params)?;
        let Some(reference) = Self::reference(ctx, params)? else {
            return Ok(None);
        };
        Ok(ctx
            .images()
            .into_iter()
            .filter(|img| views.contains(&img.view))
            .map(|img| similarity(&reference, &img.feature_vector))
            .fold(None, |best: Option<f64>, s| Some(best.map_or(s, |b| b.max(s)))))
    }
}

/// Largest left/right difference in mean density over the record's studies
/// and the views imaged on both sides. Undefined without any such pair.
pub struct DensityAsymmetry;

impl DerivedProvider for DensityAsymmetry {
    fn evaluate(&self, ctx: &RecordContext<'_>, _params: &Params) -> Result<Option<f64>, ProviderError> {
        let mut best: Option<f64> = None;
        for study in ctx.studies() {
            let images: Vec<&ImageRecord> = ctx.store.images_of(&study.study_id).collect();
            for view in [View::MLO, View::CC] {
                let side = |lat| images.iter().find(|i| i.view == view && i.laterality == lat);
                if let (Some(l), Some(r)) = (side(Laterality::L), side(Laterality::R)) {
                    let d = (l.mean_density - r.mean_density).abs();
                    best = Some(best.map_or(d, |b| b.max(d)));
                }
            }
        }
        Ok(best)
    }
}

/// Replaces every `find_one_like_it` reference image id that resolves in
/// `store` with its feature vector, so sites that do not hold the image can
/// still evaluate the comparison.
pub fn bind_reference_vectors(pred: &mut PredicateNode, store: &SiteStore) {
    pred.visit_mut(&mut |node| {
        if let PredicateNode::Derived { provider, params, .. } = node {
            if provider != FIND_ONE_LIKE_IT || params.contains_key("ref_vector") {
                return;
            }
            if let Some(ParamValue::Scalar(Literal::Str(id))) = params.get("ref") {
                if let Some(img) = store.image(id) {
                    let v = img.feature_vector.iter().map(|x| Literal::Real(*x)).collect();
                    params.insert("ref_vector".into(), ParamValue::List(v));
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ImageRecord, PatientRecord, Record, SiteId, StudyRecord};

    fn image(id: &str, study: &str, lat: Laterality, view: View, density: f64, fv: [f64; 8]) -> Record {
        Record::Image(ImageRecord {
            image_id: id.into(),
            study_id: study.into(),
            laterality: lat,
            view,
            breast_area_mm2: 100.0,
            mean_density: density,
            feature_vector: fv,
        })
    }

    fn store() -> SiteStore {
        let mut s = SiteStore::new(SiteId::new("A"));
        let report = s.ingest_batch([
            Record::Patient(PatientRecord {
                patient_id: "P1".into(),
                age_years: 52,
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
                study_date: "2001-01-01".parse().unwrap(),
                reader_ids: vec![],
                diagnosis: None,
                diagnosed_laterality: None,
                therapy_outcome: None,
            }),
            image("I1", "S1", Laterality::L, View::MLO, 0.30, [0.0; 8]),
            image(
                "I2",
                "S1",
                Laterality::R,
                View::MLO,
                0.30,
                [3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            ),
            image("I3", "S1", Laterality::L, View::CC, 0.10, [0.0; 8]),
        ]);
        assert_eq!(report.accepted, 5, "{report:?}");
        s
    }

    fn like(reference: &str, views: &[&str]) -> Params {
        let mut p = Params::new();
        p.insert("ref".into(), ParamValue::Scalar(reference.into()));
        p.insert(
            "views".into(),
            ParamValue::List(views.iter().map(|v| Literal::from(*v)).collect()),
        );
        p
    }

    #[test]
    fn identical_vectors_give_one() {
        let s = store();
        let v = FindOneLikeIt.evaluate(&RecordContext::new(&s, Entity::Image, "I1"), &like("I1", &["MLO"]));
        assert_eq!(v.unwrap(), Some(1.0));
    }

    #[test]
    fn one_coordinate_off_by_three() {
        let s = store();
        let v = FindOneLikeIt.evaluate(&RecordContext::new(&s, Entity::Image, "I2"), &like("I1", &["MLO"]));
        assert_eq!(v.unwrap(), Some(0.25));
    }

    #[test]
    fn views_filter_candidates() {
        let s = store();
        let ctx = RecordContext::new(&s, Entity::Image, "I3");
        assert_eq!(FindOneLikeIt.evaluate(&ctx, &like("I1", &["MLO"])).unwrap(), None);
        assert_eq!(
            FindOneLikeIt.evaluate(&ctx, &like("I1", &["MLO", "CC"])).unwrap(),
            Some(1.0)
        );
    }

    #[test]
    fn patient_context_takes_best_image() {
        let s = store();
        let ctx = RecordContext::new(&s, Entity::Patient, "P1");
        assert_eq!(FindOneLikeIt.evaluate(&ctx, &like("I2", &["MLO"])).unwrap(), Some(1.0));
    }

    #[test]
    fn unresolved_reference_is_undefined() {
        let s = store();
        let ctx = RecordContext::new(&s, Entity::Image, "I1");
        assert_eq!(FindOneLikeIt.evaluate(&ctx, &like("NOPE", &["MLO"])).unwrap(), None);
        assert!(FindOneLikeIt.evaluate(&ctx, &Params::new()).is_err());
    }

    #[test]
    fn symmetric_densities_give_zero_asymmetry() {
        let s = store();
        let ctx = RecordContext::new(&s, Entity::Study, "S1");
        assert_eq!(DensityAsymmetry.evaluate(&ctx, &Params::new()).unwrap(), Some(0.0));
    }

    #[test]
    fn asymmetry_needs_a_pair() {
        let mut s = store();
        s.ingest_batch([Record::Study(StudyRecord {
            study_id: "S2".into(),
            patient_id: "P1".into(),
            study_date: "2002-01-01".parse().unwrap(),
            reader_ids: vec![],
            diagnosis: None,
            diagnosed_laterality: None,
            therapy_outcome: None,
        })]);
        s.ingest_batch([image("I9", "S2", Laterality::L, View::CC, 0.5, [0.0; 8])]);
        let ctx = RecordContext::new(&s, Entity::Study, "S2");
        assert_eq!(DensityAsymmetry.evaluate(&ctx, &Params::new()).unwrap(), None);
    }

    #[test]
    fn binding_adds_the_vector() {
        let s = store();
        let mut pred = PredicateNode::derived(FIND_ONE_LIKE_IT, like("I2", &["MLO"]), crate::query::CmpOp::Ge, 0.5);
        bind_reference_vectors(&mut pred, &s);
        let PredicateNode::Derived { params, .. } = &pred else {
            unreachable!()
        };
        let Some(ParamValue::List(v)) = params.get("ref_vector") else {
            panic!("not bound")
        };
        assert_eq!(v[0], Literal::Real(3.0));
    }
}
