//! Formal query representation shared by every site.
//!
//! A [`FormalQuery`] names a target table, a predicate tree over schema
//! attributes and derived-data providers, a projection and a dispatch scope.
//! [`normalize`] produces the canonical rendering used as the knowledge-cache
//! key; [`encode`]/[`decode`] give the JSON wire text.

mod canonical;
mod wire;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{attribute, Entity, SiteId, Value};

pub use canonical::{canonical_predicate, fnv1a64, normalize, normalize_predicate, CanonicalQuery};
pub use wire::{decode, encode};

/// Maximum nesting depth of a predicate tree.
pub const MAX_DEPTH: usize = 32;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum QueryError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid query: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "between")]
    Between,
    #[serde(rename = "in")]
    In,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Between => "between",
            CmpOp::In => "in",
        }
    }

    /// Applies a single-operand comparison to an ordering of `value` vs literal.
    pub fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            CmpOp::Eq => ord == Equal,
            CmpOp::Ne => ord != Equal,
            CmpOp::Lt => ord == Less,
            CmpOp::Le => ord != Greater,
            CmpOp::Gt => ord == Greater,
            CmpOp::Ge => ord != Less,
            CmpOp::Between | CmpOp::In => false,
        }
    }
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// A literal operand. JSON numbers without a fraction or exponent are ints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Literal {
    Bool(bool),
    Int(i64),
    Real(f64),
    Str(String),
}

impl Literal {
    pub fn to_value(&self) -> Value {
        match self {
            Literal::Bool(b) => Value::Bool(*b),
            Literal::Int(i) => Value::Int(*i),
            Literal::Real(r) => Value::Real(*r),
            Literal::Str(s) => Value::Str(s.clone()),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Literal::Int(i) => Some(*i as f64),
            Literal::Real(r) => Some(*r),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Literal::Str(s) => Some(s),
            _ => None,
        }
    }
}

impl From<i64> for Literal {
    fn from(v: i64) -> Self {
        Literal::Int(v)
    }
}

impl From<f64> for Literal {
    fn from(v: f64) -> Self {
        Literal::Real(v)
    }
}

impl From<bool> for Literal {
    fn from(v: bool) -> Self {
        Literal::Bool(v)
    }
}

impl From<&str> for Literal {
    fn from(v: &str) -> Self {
        Literal::Str(v.to_string())
    }
}

/// Provider parameter: a scalar or a list of scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Scalar(Literal),
    List(Vec<Literal>),
}

pub type Params = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PredicateNode {
    And {
        children: Vec<PredicateNode>,
    },
    Or {
        children: Vec<PredicateNode>,
    },
    Not {
        child: Box<PredicateNode>,
    },
    /// Comparison of a stored attribute against literal operands.
    Cmp {
        attr: String,
        op: CmpOp,
        values: Vec<Literal>,
    },
    /// Comparison of a value computed by a derived-data provider.
    Derived {
        provider: String,
        #[serde(default)]
        params: Params,
        op: CmpOp,
        value: Literal,
    },
}

impl PredicateNode {
    pub fn and(children: Vec<PredicateNode>) -> Self {
        PredicateNode::And { children }
    }

    pub fn or(children: Vec<PredicateNode>) -> Self {
        PredicateNode::Or { children }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(child: PredicateNode) -> Self {
        PredicateNode::Not { child: Box::new(child) }
    }

    pub fn cmp(attr: &str, op: CmpOp, value: impl Into<Literal>) -> Self {
        PredicateNode::Cmp {
            attr: attr.to_string(),
            op,
            values: vec![value.into()],
        }
    }

    pub fn between(attr: &str, lo: impl Into<Literal>, hi: impl Into<Literal>) -> Self {
        PredicateNode::Cmp {
            attr: attr.to_string(),
            op: CmpOp::Between,
            values: vec![lo.into(), hi.into()],
        }
    }

    pub fn is_in(attr: &str, values: Vec<Literal>) -> Self {
        PredicateNode::Cmp {
            attr: attr.to_string(),
            op: CmpOp::In,
            values,
        }
    }

    pub fn derived(provider: &str, params: Params, op: CmpOp, value: impl Into<Literal>) -> Self {
        PredicateNode::Derived {
            provider: provider.to_string(),
            params,
            op,
            value: value.into(),
        }
    }

    /// Matches everything.
    pub fn always() -> Self {
        PredicateNode::And { children: Vec::new() }
    }

    pub fn depth(&self) -> usize {
        match self {
            PredicateNode::And { children } | PredicateNode::Or { children } => {
                1 + children.iter().map(PredicateNode::depth).max().unwrap_or(0)
            }
            PredicateNode::Not { child } => 1 + child.depth(),
            PredicateNode::Cmp { .. } | PredicateNode::Derived { .. } => 1,
        }
    }

    pub fn contains_derived(&self) -> bool {
        match self {
            PredicateNode::And { children } | PredicateNode::Or { children } => {
                children.iter().any(PredicateNode::contains_derived)
            }
            PredicateNode::Not { child } => child.contains_derived(),
            PredicateNode::Cmp { .. } => false,
            PredicateNode::Derived { .. } => true,
        }
    }

    /// Calls `f` on every node, parents before children.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a PredicateNode)) {
        f(self);
        match self {
            PredicateNode::And { children } | PredicateNode::Or { children } => {
                children.iter().for_each(|c| c.visit(f))
            }
            PredicateNode::Not { child } => child.visit(f),
            _ => {}
        }
    }

    /// Mutable pre-order traversal.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut PredicateNode)) {
        f(self);
        match self {
            PredicateNode::And { children } | PredicateNode::Or { children } => {
                children.iter_mut().for_each(|c| c.visit_mut(f))
            }
            PredicateNode::Not { child } => child.visit_mut(f),
            _ => {}
        }
    }

    /// Attribute paths referenced by `Cmp` nodes.
    pub fn attribute_paths(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.visit(&mut |n| {
            if let PredicateNode::Cmp { attr, .. } = n {
                out.push(attr.as_str());
            }
        });
        out
    }

    fn validate(&self) -> Result<(), QueryError> {
        let mut err = None;
        self.visit(&mut |n| {
            if err.is_some() {
                return;
            }
            err = match n {
                PredicateNode::Cmp { attr, op, values } => validate_cmp(attr, *op, values).err(),
                PredicateNode::Derived {
                    provider,
                    op,
                    value,
                    params,
                } => validate_derived(provider, *op, value, params).err(),
                _ => None,
            };
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

fn invalid(msg: impl Into<String>) -> QueryError {
    QueryError::Invalid(msg.into())
}

fn check_literal(lit: &Literal) -> Result<(), QueryError> {
    match lit {
        Literal::Real(r) if !r.is_finite() => Err(invalid("non-finite literal")),
        _ => Ok(()),
    }
}

fn validate_cmp(attr: &str, op: CmpOp, values: &[Literal]) -> Result<(), QueryError> {
    let def = attribute(attr).ok_or_else(|| invalid(format!("unknown attribute path `{attr}`")))?;
    if !def.kind.is_comparable() {
        return Err(invalid(format!("attribute `{attr}` cannot be compared")));
    }
    values.iter().try_for_each(check_literal)?;
    match op {
        CmpOp::Between => {
            let [lo, hi] = values else {
                return Err(invalid(format!("`between` on `{attr}` needs exactly two literals")));
            };
            match lo.to_value().compare(&hi.to_value()) {
                Some(std::cmp::Ordering::Greater) => Err(invalid(format!(
                    "`between` on `{attr}` has lower bound above upper bound"
                ))),
                Some(_) => Ok(()),
                None => Err(invalid(format!("`between` bounds on `{attr}` are not comparable"))),
            }
        }
        CmpOp::In if values.is_empty() => Err(invalid(format!("`in` on `{attr}` needs at least one literal"))),
        CmpOp::In => Ok(()),
        _ if values.len() != 1 => Err(invalid(format!("`{op}` on `{attr}` needs exactly one literal"))),
        _ => Ok(()),
    }
}

fn validate_derived(provider: &str, op: CmpOp, value: &Literal, params: &Params) -> Result<(), QueryError> {
    if provider.is_empty() {
        return Err(invalid("empty provider id"));
    }
    if matches!(op, CmpOp::Between | CmpOp::In) {
        return Err(invalid(format!("`{op}` is not supported on derived values")));
    }
    if value.as_f64().is_none() {
        return Err(invalid(format!(
            "derived comparison on `{provider}` needs a numeric literal"
        )));
    }
    check_literal(value)?;
    for p in params.values() {
        match p {
            ParamValue::Scalar(l) => check_literal(l)?,
            ParamValue::List(ls) => ls.iter().try_for_each(check_literal)?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Projection {
    #[default]
    All,
    Paths(Vec<String>),
}

impl Projection {
    /// Resolves to concrete paths for `target`.
    pub fn paths(&self, target: Entity) -> Vec<String> {
        match self {
            Projection::All => crate::model::entity_paths(target),
            Projection::Paths(p) => p.clone(),
        }
    }
}

impl Serialize for Projection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Projection::All => s.serialize_str("ALL"),
            Projection::Paths(p) => p.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Projection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Keyword(String),
            Paths(Vec<String>),
        }
        match Repr::deserialize(d)? {
            Repr::Keyword(k) if k == "ALL" => Ok(Projection::All),
            Repr::Keyword(k) => Err(serde::de::Error::custom(format!(
                "expected \"ALL\" or a list of paths, got \"{k}\""
            ))),
            Repr::Paths(p) => Ok(Projection::Paths(p)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scope {
    pub origin_site: SiteId,
    /// 1 fans the query out to every peer; 0 keeps it at the receiving site.
    pub hop_budget: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormalQuery {
    pub target: Entity,
    pub predicate: PredicateNode,
    pub projection: Projection,
    pub scope: Scope,
}

impl FormalQuery {
    pub fn new(target: Entity, predicate: PredicateNode, origin: SiteId, hop_budget: u8) -> Self {
        FormalQuery {
            target,
            predicate,
            projection: Projection::All,
            scope: Scope {
                origin_site: origin,
                hop_budget,
            },
        }
    }

    pub fn is_global(&self) -> bool {
        self.scope.hop_budget == 1
    }

    /// Same query with a different hop budget.
    pub fn with_hop_budget(&self, hop_budget: u8) -> Self {
        let mut q = self.clone();
        q.scope.hop_budget = hop_budget;
        q
    }

    pub fn validate(&self) -> Result<(), QueryError> {
        if self.scope.hop_budget > 1 {
            return Err(invalid(format!("hop_budget {} outside {{0,1}}", self.scope.hop_budget)));
        }
        if self.scope.origin_site.is_empty() {
            return Err(invalid("empty origin_site"));
        }
        let depth = self.predicate.depth();
        if depth > MAX_DEPTH {
            return Err(invalid(format!("predicate depth {depth} exceeds {MAX_DEPTH}")));
        }
        if let Projection::Paths(paths) = &self.projection {
            if let Some(p) = paths.iter().find(|p| attribute(p).is_none()) {
                return Err(invalid(format!("unknown projection path `{p}`")));
            }
        }
        self.predicate.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(pred: PredicateNode) -> FormalQuery {
        FormalQuery::new(Entity::Image, pred, SiteId::new("A"), 1)
    }

    #[test]
    fn validation_rules() {
        assert!(q(PredicateNode::between("patient.age_years", 50, 55))
            .validate()
            .is_ok());
        assert!(q(PredicateNode::between("patient.age_years", 55, 50))
            .validate()
            .is_err());
        assert!(q(PredicateNode::cmp("patient.bogus", CmpOp::Eq, 1)).validate().is_err());
        assert!(q(PredicateNode::cmp("image.feature_vector", CmpOp::Eq, 1))
            .validate()
            .is_err());
        assert!(q(PredicateNode::Cmp {
            attr: "patient.age_years".into(),
            op: CmpOp::Eq,
            values: vec![]
        })
        .validate()
        .is_err());
        assert!(q(PredicateNode::derived("x", Params::new(), CmpOp::Between, 0.5))
            .validate()
            .is_err());
        assert!(q(PredicateNode::cmp("patient.age_years", CmpOp::Gt, f64::NAN))
            .validate()
            .is_err());
        let mut bad_hop = q(PredicateNode::always());
        bad_hop.scope.hop_budget = 2;
        assert!(bad_hop.validate().is_err());
    }

    #[test]
    fn depth_limit() {
        let mut p = PredicateNode::cmp("patient.hrt", CmpOp::Eq, true);
        for _ in 0..31 {
            p = PredicateNode::not(p);
        }
        assert_eq!(p.depth(), 32);
        assert!(q(p.clone()).validate().is_ok());
        assert!(q(PredicateNode::not(p)).validate().is_err());
    }
}
