//! Canonical rendering and the 64-bit cache key.

use super::{CmpOp, FormalQuery, Literal, ParamValue, PredicateNode, Projection};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CanonicalQuery {
    pub canonical_text: String,
    pub key: u64,
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(PRIME))
}

fn render_literal(lit: &Literal, out: &mut String) {
    match lit {
        Literal::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Literal::Int(i) => out.push_str(&i.to_string()),
        // Display for f64 is the shortest decimal that round-trips.
        Literal::Real(r) => out.push_str(&r.to_string()),
        Literal::Str(s) => out.push_str(&serde_json::to_string(s).expect("strings serialize")),
    }
}

fn literal_text(lit: &Literal) -> String {
    let mut s = String::new();
    render_literal(lit, &mut s);
    s
}

fn render(node: &PredicateNode, out: &mut String) {
    match node {
        PredicateNode::And { children } | PredicateNode::Or { children } => {
            out.push_str(if matches!(node, PredicateNode::And { .. }) {
                "(and"
            } else {
                "(or"
            });
            for c in children {
                out.push(' ');
                render(c, out);
            }
            out.push(')');
        }
        PredicateNode::Not { child } => {
            out.push_str("(not ");
            render(child, out);
            out.push(')');
        }
        PredicateNode::Cmp { attr, op, values } => {
            out.push_str("(cmp ");
            out.push_str(attr);
            out.push(' ');
            out.push_str(op.symbol());
            for v in values {
                out.push(' ');
                render_literal(v, out);
            }
            out.push(')');
        }
        PredicateNode::Derived {
            provider,
            params,
            op,
            value,
        } => {
            out.push_str("(derived ");
            out.push_str(provider);
            out.push_str(" {");
            for (i, (k, v)) in params.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("strings serialize"));
                out.push('=');
                match v {
                    ParamValue::Scalar(l) => render_literal(l, out),
                    ParamValue::List(ls) => {
                        out.push('[');
                        for (j, l) in ls.iter().enumerate() {
                            if j > 0 {
                                out.push(',');
                            }
                            render_literal(l, out);
                        }
                        out.push(']');
                    }
                }
            }
            out.push_str("} ");
            out.push_str(op.symbol());
            out.push(' ');
            render_literal(value, out);
            out.push(')');
        }
    }
}

/// Canonical text of an already-normalized predicate.
fn predicate_text(node: &PredicateNode) -> String {
    let mut s = String::new();
    render(node, &mut s);
    s
}

/// Rewrites a predicate into canonical shape: double negations removed,
/// `and`/`or` children ordered by their canonical text, `in` lists sorted and
/// deduplicated. `between` stays atomic.
pub fn normalize_predicate(node: &PredicateNode) -> PredicateNode {
    match node {
        PredicateNode::And { children } | PredicateNode::Or { children } => {
            let mut keyed: Vec<(String, PredicateNode)> = children
                .iter()
                .map(|c| {
                    let n = normalize_predicate(c);
                    (predicate_text(&n), n)
                })
                .collect();
            keyed.sort_by(|a, b| a.0.cmp(&b.0));
            let children = keyed.into_iter().map(|(_, n)| n).collect();
            if matches!(node, PredicateNode::And { .. }) {
                PredicateNode::And { children }
            } else {
                PredicateNode::Or { children }
            }
        }
        PredicateNode::Not { child } => match child.as_ref() {
            PredicateNode::Not { child: inner } => normalize_predicate(inner),
            other => PredicateNode::not(normalize_predicate(other)),
        },
        PredicateNode::Cmp {
            attr,
            op: CmpOp::In,
            values,
        } => {
            let mut keyed: Vec<(String, Literal)> = values.iter().map(|v| (literal_text(v), v.clone())).collect();
            keyed.sort_by(|a, b| a.0.cmp(&b.0));
            keyed.dedup_by(|a, b| a.0 == b.0);
            PredicateNode::Cmp {
                attr: attr.clone(),
                op: CmpOp::In,
                values: keyed.into_iter().map(|(_, v)| v).collect(),
            }
        }
        leaf => leaf.clone(),
    }
}

/// Canonical text of any predicate.
pub fn canonical_predicate(node: &PredicateNode) -> String {
    predicate_text(&normalize_predicate(node))
}

/// Canonical form of a whole query: target, projection, scope and predicate.
pub fn normalize(q: &FormalQuery) -> CanonicalQuery {
    let projection = match &q.projection {
        Projection::All => "ALL".to_string(),
        Projection::Paths(p) => p.join(","),
    };
    let canonical_text = format!(
        "target={};projection={};origin={};hop={};predicate={}",
        q.target.table(),
        projection,
        serde_json::to_string(q.scope.origin_site.as_str()).expect("strings serialize"),
        q.scope.hop_budget,
        canonical_predicate(&q.predicate)
    );
    let key = fnv1a64(canonical_text.as_bytes());
    CanonicalQuery { canonical_text, key }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Entity, SiteId};
    use crate::query::Params;

    fn age() -> PredicateNode {
        PredicateNode::between("patient.age_years", 50, 55)
    }

    fn hrt() -> PredicateNode {
        PredicateNode::cmp("patient.hrt", CmpOp::Eq, true)
    }

    fn q(p: PredicateNode) -> FormalQuery {
        FormalQuery::new(Entity::Image, p, SiteId::new("A"), 1)
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn and_is_commutative() {
        let a = normalize(&q(PredicateNode::and(vec![age(), hrt()])));
        let b = normalize(&q(PredicateNode::and(vec![hrt(), age()])));
        assert_eq!(a, b);
    }

    #[test]
    fn double_negation_removed() {
        let a = canonical_predicate(&PredicateNode::not(PredicateNode::not(age())));
        assert_eq!(a, canonical_predicate(&age()));
        assert_eq!(a, "(cmp patient.age_years between 50 55)");
    }

    #[test]
    fn the_two_example_queries_differ() {
        let a = normalize(&q(age()));
        let b = normalize(&q(PredicateNode::and(vec![
            PredicateNode::cmp("patient.age_years", CmpOp::Gt, 50),
            hrt(),
        ])));
        assert_eq!(
            a.canonical_text,
            "target=images;projection=ALL;origin=\"A\";hop=1;predicate=(cmp patient.age_years between 50 55)"
        );
        assert_eq!(
            b.canonical_text,
            "target=images;projection=ALL;origin=\"A\";hop=1;predicate=(and (cmp patient.age_years > 50) (cmp patient.hrt = true))"
        );
        assert_ne!(a.key, b.key);
    }

    #[test]
    fn in_lists_sorted_and_deduped() {
        let p = PredicateNode::is_in("image.view", vec!["MLO".into(), "CC".into(), "MLO".into()]);
        assert_eq!(canonical_predicate(&p), r#"(cmp image.view in "CC" "MLO")"#);
    }

    #[test]
    fn derived_params_render_sorted() {
        let mut params = Params::new();
        params.insert("views".into(), ParamValue::List(vec!["MLO".into()]));
        params.insert("ref".into(), ParamValue::Scalar("I1".into()));
        let p = PredicateNode::derived("find_one_like_it", params, CmpOp::Ge, 0.8);
        assert_eq!(
            canonical_predicate(&p),
            r#"(derived find_one_like_it {"ref"="I1","views"=["MLO"]} >= 0.8)"#
        );
    }

    #[test]
    fn scope_is_part_of_the_key() {
        let global = normalize(&q(age()));
        let local = normalize(&q(age()).with_hop_budget(0));
        assert_ne!(global.key, local.key);
    }
}
