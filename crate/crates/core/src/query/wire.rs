//! JSON wire text for formal queries.

use super::{FormalQuery, QueryError};

/// Deterministic JSON rendering of a query.
pub fn encode(q: &FormalQuery) -> String {
    serde_json::to_string(q).expect("formal queries always serialize")
}

/// Parses and validates wire text. Syntax and shape errors carry the byte
/// offset where parsing stopped.
pub fn decode(text: &str) -> Result<FormalQuery, QueryError> {
    let q: FormalQuery = serde_json::from_str(text).map_err(|e| QueryError::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: strip_position(&e.to_string()),
    })?;
    q.validate()?;
    Ok(q)
}

/// serde_json reports 1-based lines and 1-based columns (0 when the error is
/// before the first character of a line).
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column).min(text.len())
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Entity, SiteId};
    use crate::query::{normalize, CmpOp, ParamValue, Params, PredicateNode, Projection};

    #[test]
    fn truncated_object_reports_offset_one() {
        match decode("{") {
            Err(QueryError::Parse { offset, .. }) => assert_eq!(offset, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn offsets_count_earlier_lines() {
        let text = "{\n  \"target\": \"images\",\n  \"predicate\": ]\n}";
        match decode(text) {
            Err(QueryError::Parse { offset, .. }) => assert_eq!(&text[offset - 1..offset], "]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn field_names_are_normative() {
        let q = FormalQuery::new(
            Entity::Image,
            PredicateNode::between("patient.age_years", 50, 55),
            SiteId::new("A"),
            1,
        );
        assert_eq!(
            encode(&q),
            r#"{"target":"images","predicate":{"kind":"cmp","attr":"patient.age_years","op":"between","values":[50,55]},"projection":"ALL","scope":{"origin_site":"A","hop_budget":1}}"#
        );
    }

    #[test]
    fn age_band_round_trip() {
        let q = FormalQuery::new(
            Entity::Image,
            PredicateNode::between("patient.age_years", 50, 55),
            SiteId::new("A"),
            1,
        );
        assert_eq!(normalize(&decode(&encode(&q)).unwrap()), normalize(&q));
    }

    #[test]
    fn derived_round_trip() {
        let mut params = Params::new();
        params.insert("ref".into(), ParamValue::Scalar("I1".into()));
        let mut q = FormalQuery::new(
            Entity::Patient,
            PredicateNode::derived("find_one_like_it", params, CmpOp::Ge, 0.8),
            SiteId::new("A"),
            0,
        );
        q.projection = Projection::Paths(vec!["patient.patient_id".into()]);
        let back = decode(&encode(&q)).unwrap();
        assert_eq!(back, q);
        assert_eq!(normalize(&back), normalize(&q));
    }

    #[test]
    fn invalid_queries_rejected_after_parsing() {
        let text = r#"{"target":"images","predicate":{"kind":"cmp","attr":"patient.nope","op":"=","values":[1]},"projection":"ALL","scope":{"origin_site":"A","hop_budget":0}}"#;
        assert!(matches!(decode(text), Err(QueryError::Invalid(_))));
        let text = r#"{"target":"wards","predicate":{"kind":"and","children":[]},"projection":"ALL","scope":{"origin_site":"A","hop_budget":0}}"#;
        assert!(matches!(decode(text), Err(QueryError::Parse { .. })));
    }
}
