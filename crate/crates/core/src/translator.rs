//! User terms to formal queries.
//!
//! The query language is a small keyword DSL:
//!
//! ```text
//! find <entity> [local] [where <cond> { and|or <cond> }]
//! cond := not <cond> | ( <expr> )
//!       | <term> <op> <literal>            op: = != < <= > >= over under
//!       | <term> between <lit> and <lit>   (inclusive)
//!       | <term> in ( <lit>, ... )
//!       | <term> like image <id> threshold <t> [in MLO|CC|both]
//! ```
//!
//! `and` binds tighter than `or`. Terms may span several words and are looked
//! up case-insensitively in a [`TermDictionary`]; raw attribute paths such as
//! `patient.age_years` are always accepted.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::model::{attribute, Entity, PatientRecord, SiteId, ValueKind, View};
use crate::query::{CmpOp, FormalQuery, Literal, ParamValue, Params, PredicateNode, QueryError};

pub use crate::local::FIND_ONE_LIKE_IT;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TranslateError {
    #[error("parse error at byte {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("unknown term \"{0}\"")]
    UnknownTerm(String),
    #[error("criteria error: {0}")]
    Criteria(String),
    #[error("dictionary error: {0}")]
    Dictionary(String),
    #[error(transparent)]
    Query(#[from] QueryError),
}

/// What a user term stands for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TermTarget {
    Attribute(String),
    Provider(String),
}

#[derive(Debug, Clone)]
pub struct TermDictionary {
    version: u32,
    terms: HashMap<String, TermTarget>,
}

#[derive(Deserialize)]
#[serde(tag = "entity", rename_all = "lowercase")]
enum DictionaryLine {
    Dictionary {
        version: u32,
    },
    Term {
        term: String,
        path: Option<String>,
        provider: Option<String>,
    },
}

const DEFAULT_TERMS: &str = include_str!("../resources/terms.jsonl");

fn term_key(term: &str) -> String {
    term.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

impl TermDictionary {
    pub fn empty() -> Self {
        TermDictionary {
            version: 0,
            terms: HashMap::new(),
        }
    }

    /// Loads a dictionary in the JSONL resource format.
    pub fn from_jsonl(text: &str) -> Result<Self, TranslateError> {
        let mut dict = TermDictionary::empty();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: DictionaryLine =
                serde_json::from_str(line).map_err(|e| TranslateError::Dictionary(format!("line {}: {e}", idx + 1)))?;
            match parsed {
                DictionaryLine::Dictionary { version } => dict.version = version,
                DictionaryLine::Term {
                    term,
                    path: Some(p),
                    provider: None,
                } => dict.insert(&term, TermTarget::Attribute(p))?,
                DictionaryLine::Term {
                    term,
                    path: None,
                    provider: Some(p),
                } => dict.insert(&term, TermTarget::Provider(p))?,
                DictionaryLine::Term { term, .. } => {
                    return Err(TranslateError::Dictionary(format!(
                        "term \"{term}\" needs exactly one of path or provider"
                    )))
                }
            }
        }
        Ok(dict)
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn insert(&mut self, term: &str, target: TermTarget) -> Result<(), TranslateError> {
        if let TermTarget::Attribute(p) = &target {
            if attribute(p).is_none() {
                return Err(TranslateError::Dictionary(format!(
                    "term \"{term}\" maps to unknown path `{p}`"
                )));
            }
        }
        let key = term_key(term);
        match self.terms.get(&key) {
            Some(existing) if existing != &target => Err(TranslateError::Dictionary(format!(
                "term \"{term}\" mapped twice with conflicting meanings"
            ))),
            _ => {
                self.terms.insert(key, target);
                Ok(())
            }
        }
    }

    /// Resolves a term; bare attribute paths resolve to themselves.
    pub fn resolve(&self, term: &str) -> Option<TermTarget> {
        let key = term_key(term);
        if let Some(t) = self.terms.get(&key) {
            return Some(t.clone());
        }
        attribute(term.trim()).map(|_| TermTarget::Attribute(term.trim().to_string()))
    }
}

impl Default for TermDictionary {
    fn default() -> Self {
        TermDictionary::from_jsonl(DEFAULT_TERMS).expect("shipped dictionary is valid")
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Quoted(String),
    Sym(&'static str),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>, TranslateError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let sym = match c {
            '(' => Some("("),
            ')' => Some(")"),
            ',' => Some(","),
            '=' => Some("="),
            '!' if bytes.get(i + 1) == Some(&b'=') => Some("!="),
            '<' if bytes.get(i + 1) == Some(&b'=') => Some("<="),
            '>' if bytes.get(i + 1) == Some(&b'=') => Some(">="),
            '<' => Some("<"),
            '>' => Some(">"),
            _ => None,
        };
        if let Some(s) = sym {
            i += s.len();
            out.push(Token {
                tok: Tok::Sym(s),
                pos: start,
            });
            continue;
        }
        if c == '"' || c == '\'' {
            let mut end = i + 1;
            while end < bytes.len() && bytes[end] as char != c {
                end += 1;
            }
            if end >= bytes.len() {
                return Err(TranslateError::Parse {
                    position: start,
                    message: "unterminated string".into(),
                });
            }
            out.push(Token {
                tok: Tok::Quoted(text[i + 1..end].to_string()),
                pos: start,
            });
            i = end + 1;
            continue;
        }
        let is_word = |ch: char| ch.is_alphanumeric() || matches!(ch, '_' | '.' | '-' | ':' | '/' | '+');
        if !is_word(c) {
            return Err(TranslateError::Parse {
                position: start,
                message: format!("unexpected character '{c}'"),
            });
        }
        let rest = &text[i..];
        let len = rest.find(|ch: char| !is_word(ch)).unwrap_or(rest.len());
        out.push(Token {
            tok: Tok::Word(rest[..len].to_string()),
            pos: start,
        });
        i += len;
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Token>,
    idx: usize,
    end: usize,
    dict: &'a TermDictionary,
}

fn is_keyword(w: &str, kw: &str) -> bool {
    w.eq_ignore_ascii_case(kw)
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.idx).map(|t| &t.tok)
    }

    fn peek_at(&self, off: usize) -> Option<&Tok> {
        self.toks.get(self.idx + off).map(|t| &t.tok)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.idx).map_or(self.end, |t| t.pos)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, TranslateError> {
        Err(TranslateError::Parse {
            position: self.pos(),
            message: message.into(),
        })
    }

    fn peek_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Word(w)) if is_keyword(w, kw))
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if self.peek_keyword(kw) {
            self.idx += 1;
            true
        } else {
            false
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), TranslateError> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            self.err(format!("expected `{kw}`"))
        }
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Sym(x)) if *x == s) {
            self.idx += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> Result<(), TranslateError> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            self.err(format!("expected `{s}`"))
        }
    }

    fn expr(&mut self) -> Result<PredicateNode, TranslateError> {
        let mut alts = vec![self.conjunction()?];
        while self.eat_keyword("or") {
            alts.push(self.conjunction()?);
        }
        Ok(if alts.len() == 1 {
            alts.pop().unwrap()
        } else {
            PredicateNode::or(alts)
        })
    }

    fn conjunction(&mut self) -> Result<PredicateNode, TranslateError> {
        let mut parts = vec![self.unary()?];
        while self.eat_keyword("and") {
            parts.push(self.unary()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            PredicateNode::and(parts)
        })
    }

    fn unary(&mut self) -> Result<PredicateNode, TranslateError> {
        if self.eat_keyword("not") {
            return Ok(PredicateNode::not(self.unary()?));
        }
        if self.eat_sym("(") {
            let inner = self.expr()?;
            self.expect_sym(")")?;
            return Ok(inner);
        }
        self.condition()
    }

    /// Words of a term, up to the comparison keyword or symbol.
    fn term(&mut self) -> Result<(String, usize), TranslateError> {
        let start = self.pos();
        let mut words = Vec::new();
        while let Some(Tok::Word(w)) = self.peek() {
            let stop = ["over", "under", "between", "in"].iter().any(|k| is_keyword(w, k))
                || (is_keyword(w, "like") && matches!(self.peek_at(1), Some(Tok::Word(n)) if is_keyword(n, "image")));
            if stop {
                break;
            }
            words.push(w.clone());
            self.idx += 1;
        }
        Ok((words.join(" "), start))
    }

    fn literal(&mut self) -> Result<Literal, TranslateError> {
        let lit = match self.peek() {
            Some(Tok::Quoted(s)) => Literal::Str(s.clone()),
            Some(Tok::Word(w)) => classify(w),
            _ => return self.err("expected a literal"),
        };
        self.idx += 1;
        Ok(lit)
    }

    fn condition(&mut self) -> Result<PredicateNode, TranslateError> {
        let (term, term_pos) = self.term()?;
        if self.peek_keyword("like") {
            return self.like_condition(&term);
        }
        if term.is_empty() {
            return self.err("expected a term");
        }
        let target = self
            .dict
            .resolve(&term)
            .ok_or_else(|| TranslateError::UnknownTerm(term.clone()))?;
        let (op, values) = if self.eat_keyword("between") {
            let lo = self.literal()?;
            self.expect_keyword("and")?;
            let hi = self.literal()?;
            (CmpOp::Between, vec![lo, hi])
        } else if self.eat_keyword("in") {
            self.expect_sym("(")?;
            let mut values = vec![self.literal()?];
            while self.eat_sym(",") {
                values.push(self.literal()?);
            }
            self.expect_sym(")")?;
            (CmpOp::In, values)
        } else if self.eat_keyword("over") {
            (CmpOp::Gt, vec![self.literal()?])
        } else if self.eat_keyword("under") {
            (CmpOp::Lt, vec![self.literal()?])
        } else {
            let op = match self.peek() {
                Some(Tok::Sym("=")) => CmpOp::Eq,
                Some(Tok::Sym("!=")) => CmpOp::Ne,
                Some(Tok::Sym("<")) => CmpOp::Lt,
                Some(Tok::Sym("<=")) => CmpOp::Le,
                Some(Tok::Sym(">")) => CmpOp::Gt,
                Some(Tok::Sym(">=")) => CmpOp::Ge,
                _ => return self.err(format!("expected a comparison after \"{term}\"")),
            };
            self.idx += 1;
            (op, vec![self.literal()?])
        };
        match target {
            TermTarget::Attribute(path) => {
                let values = values
                    .into_iter()
                    .map(|v| coerce(&path, v, term_pos))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(PredicateNode::Cmp { attr: path, op, values })
            }
            TermTarget::Provider(provider) => {
                let [value] = <[Literal; 1]>::try_from(values).map_err(|_| TranslateError::Parse {
                    position: term_pos,
                    message: format!("\"{term}\" supports only single-value comparisons"),
                })?;
                Ok(PredicateNode::derived(&provider, Params::new(), op, value))
            }
        }
    }

    fn like_condition(&mut self, term: &str) -> Result<PredicateNode, TranslateError> {
        let provider = if term.is_empty() {
            FIND_ONE_LIKE_IT.to_string()
        } else {
            match self.dict.resolve(term) {
                Some(TermTarget::Provider(p)) => p,
                Some(TermTarget::Attribute(_)) => return self.err(format!("\"{term}\" is not an algorithm")),
                None => return Err(TranslateError::UnknownTerm(term.to_string())),
            }
        };
        self.expect_keyword("like")?;
        self.expect_keyword("image")?;
        let reference = match self.literal()? {
            Literal::Str(s) => s,
            other => literal_text(&other),
        };
        self.expect_keyword("threshold")?;
        let threshold = match self.literal()?.as_f64() {
            Some(t) if (0.0..=1.0).contains(&t) => t,
            _ => return self.err("threshold must be a number in [0,1]"),
        };
        let views: Vec<View> = if self.eat_keyword("in") {
            let views = match self.peek() {
                Some(Tok::Word(w)) if is_keyword(w, "mlo") => vec![View::MLO],
                Some(Tok::Word(w)) if is_keyword(w, "cc") => vec![View::CC],
                Some(Tok::Word(w)) if is_keyword(w, "both") => vec![View::MLO, View::CC],
                _ => return self.err("expected MLO, CC or both"),
            };
            self.idx += 1;
            views
        } else {
            vec![View::MLO, View::CC]
        };
        Ok(PredicateNode::derived(
            &provider,
            like_params(&reference, &views),
            CmpOp::Ge,
            threshold,
        ))
    }
}

fn like_params(reference: &str, views: &[View]) -> Params {
    let mut params = Params::new();
    params.insert("ref".into(), ParamValue::Scalar(Literal::Str(reference.to_string())));
    params.insert(
        "views".into(),
        ParamValue::List(views.iter().map(|v| Literal::Str(v.as_str().to_string())).collect()),
    );
    params
}

fn classify(word: &str) -> Literal {
    if word.eq_ignore_ascii_case("true") {
        Literal::Bool(true)
    } else if word.eq_ignore_ascii_case("false") {
        Literal::Bool(false)
    } else if let Ok(i) = word.parse::<i64>() {
        Literal::Int(i)
    } else if let Ok(r) = word.parse::<f64>() {
        if r.is_finite() && word.chars().any(|c| c.is_ascii_digit()) {
            Literal::Real(r)
        } else {
            Literal::Str(word.to_string())
        }
    } else {
        Literal::Str(word.to_string())
    }
}

fn literal_text(lit: &Literal) -> String {
    match lit {
        Literal::Bool(b) => b.to_string(),
        Literal::Int(i) => i.to_string(),
        Literal::Real(r) => r.to_string(),
        Literal::Str(s) => s.clone(),
    }
}

/// Fits a parsed literal to the attribute's kind.
fn coerce(path: &str, lit: Literal, position: usize) -> Result<Literal, TranslateError> {
    let kind = attribute(path).map(|a| a.kind);
    let mismatch = |what: &str| TranslateError::Parse {
        position,
        message: format!("`{path}` expects {what}, got {}", literal_text(&lit)),
    };
    match (kind, &lit) {
        (Some(ValueKind::Str | ValueKind::Date), Literal::Str(_)) => Ok(lit),
        (Some(ValueKind::Str | ValueKind::Date), other) => Ok(Literal::Str(literal_text(other))),
        (Some(ValueKind::Int | ValueKind::Real), Literal::Int(_) | Literal::Real(_)) => Ok(lit),
        (Some(ValueKind::Int | ValueKind::Real), _) => Err(mismatch("a number")),
        (Some(ValueKind::Bool), Literal::Bool(_)) => Ok(lit),
        (Some(ValueKind::Bool), _) => Err(mismatch("true or false")),
        _ => Ok(lit),
    }
}

fn target_entity(word: &str) -> Option<Entity> {
    let w = word.to_lowercase();
    match w.as_str() {
        "mammograms" | "mammogram" => Some(Entity::Image),
        _ => Entity::from_table(&w).or_else(|| Entity::from_name(&w)),
    }
}

/// Translates DSL text into a formal query originating at `origin`.
///
/// Queries are global (hop budget 1) unless the `local` keyword follows the
/// entity; the projection is `ALL`.
pub fn translate(text: &str, dict: &TermDictionary, origin: &SiteId) -> Result<FormalQuery, TranslateError> {
    let mut p = Parser {
        toks: tokenize(text)?,
        idx: 0,
        end: text.len(),
        dict,
    };
    p.expect_keyword("find")?;
    p.eat_keyword("all");
    let target = match p.peek() {
        Some(Tok::Word(w)) => match target_entity(w) {
            Some(e) => e,
            None => return p.err(format!("unknown entity \"{w}\"")),
        },
        _ => return p.err("expected an entity"),
    };
    p.idx += 1;
    let hop_budget = if p.eat_keyword("local") { 0 } else { 1 };
    let predicate = if p.eat_keyword("where") {
        p.expr()?
    } else {
        PredicateNode::always()
    };
    if p.idx < p.toks.len() {
        return p.err("unexpected trailing input");
    }
    let q = FormalQuery::new(target, predicate, origin.clone(), hop_budget);
    q.validate()?;
    Ok(q)
}

/// Image-similarity part of similar-case criteria.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMatch {
    pub reference_image: String,
    pub threshold: f64,
    #[serde(default = "both_views")]
    pub views: Vec<View>,
}

fn both_views() -> Vec<View> {
    vec![View::MLO, View::CC]
}

fn default_age_band() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCriteria {
    #[serde(default = "default_age_band")]
    pub age_band: u32,
    #[serde(default)]
    pub match_children_band: bool,
    /// Width for both pregnancy ages. No default width exists for this one.
    #[serde(default)]
    pub match_pregnancy_ages_band: Option<u32>,
    #[serde(default)]
    pub image_match: Option<ImageMatch>,
}

impl Default for SimilarityCriteria {
    fn default() -> Self {
        SimilarityCriteria {
            age_band: default_age_band(),
            match_children_band: false,
            match_pregnancy_ages_band: None,
            image_match: None,
        }
    }
}

/// Children-count band containing `count`: `{0}`, `[1,2]`, `[3,4]`, `[5,∞)`.
pub fn children_band(count: u32) -> (u32, Option<u32>) {
    match count {
        0 => (0, Some(0)),
        1..=2 => (1, Some(2)),
        3..=4 => (3, Some(4)),
        _ => (5, None),
    }
}

fn band(path: &str, center: i64, width: u32) -> PredicateNode {
    let lo = (center - i64::from(width)).max(0);
    PredicateNode::between(path, lo, center + i64::from(width))
}

/// Builds the global "find similar cases" query for a reference patient.
pub fn build_similarity_query(
    reference: &PatientRecord,
    crit: &SimilarityCriteria,
    origin: &SiteId,
) -> Result<FormalQuery, TranslateError> {
    let mut parts = vec![
        PredicateNode::cmp("patient.patient_id", CmpOp::Ne, reference.patient_id.as_str()),
        band("patient.age_years", reference.age_years, crit.age_band),
    ];
    if crit.match_children_band {
        parts.push(match children_band(reference.children_count) {
            (0, _) => PredicateNode::cmp("patient.children_count", CmpOp::Eq, 0),
            (lo, Some(hi)) => PredicateNode::between("patient.children_count", i64::from(lo), i64::from(hi)),
            (lo, None) => PredicateNode::cmp("patient.children_count", CmpOp::Ge, i64::from(lo)),
        });
    }
    if let Some(width) = crit.match_pregnancy_ages_band {
        let first = reference
            .age_first_pregnancy
            .ok_or_else(|| TranslateError::Criteria("reference patient has no age_first_pregnancy".into()))?;
        let last = reference
            .age_last_pregnancy
            .ok_or_else(|| TranslateError::Criteria("reference patient has no age_last_pregnancy".into()))?;
        parts.push(band("patient.age_first_pregnancy", first, width));
        parts.push(band("patient.age_last_pregnancy", last, width));
    }
    if let Some(m) = &crit.image_match {
        if !(0.0..=1.0).contains(&m.threshold) {
            return Err(TranslateError::Criteria(format!(
                "threshold {} outside [0,1]",
                m.threshold
            )));
        }
        if m.views.is_empty() {
            return Err(TranslateError::Criteria("image match needs at least one view".into()));
        }
        parts.push(PredicateNode::derived(
            FIND_ONE_LIKE_IT,
            like_params(&m.reference_image, &m.views),
            CmpOp::Ge,
            m.threshold,
        ));
    }
    let q = FormalQuery::new(Entity::Patient, PredicateNode::and(parts), origin.clone(), 1);
    q.validate()?;
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::normalize;

    fn site() -> SiteId {
        SiteId::new("A")
    }

    fn tr(text: &str) -> Result<FormalQuery, TranslateError> {
        translate(text, &TermDictionary::default(), &site())
    }

    #[test]
    fn age_band_query() {
        let q = tr("find images where age between 50 and 55").unwrap();
        assert_eq!(q.target, Entity::Image);
        assert_eq!(q.predicate, PredicateNode::between("patient.age_years", 50, 55));
        assert_eq!(q.scope.hop_budget, 1);
    }

    #[test]
    fn over_fifty_on_hrt() {
        let q = tr("find images where age over 50 and HRT = true").unwrap();
        assert_eq!(
            q.predicate,
            PredicateNode::and(vec![
                PredicateNode::cmp("patient.age_years", CmpOp::Gt, 50),
                PredicateNode::cmp("patient.hrt", CmpOp::Eq, true),
            ])
        );
        let q2 = tr("find all mammograms where age over 50 and undergoing HRT = true").unwrap();
        assert_eq!(normalize(&q).key, normalize(&q2).key);
    }

    #[test]
    fn unknown_term_named() {
        assert_eq!(
            tr("find images where bogus = 1").unwrap_err(),
            TranslateError::UnknownTerm("bogus".into())
        );
    }

    #[test]
    fn grammar_errors_carry_positions() {
        match tr("find images where age between 50 55") {
            Err(TranslateError::Parse { position, .. }) => assert_eq!(position, 33),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            tr("find wards"),
            Err(TranslateError::Parse { position: 5, .. })
        ));
        assert!(matches!(
            tr("find images where (age > 3"),
            Err(TranslateError::Parse { .. })
        ));
        assert!(matches!(
            tr("find images where age > 3 extra"),
            Err(TranslateError::Parse { .. })
        ));
    }

    #[test]
    fn precedence_and_grouping() {
        let q = tr("find patients local where age < 40 or age > 60 and hrt = false").unwrap();
        assert_eq!(q.scope.hop_budget, 0);
        assert_eq!(
            q.predicate,
            PredicateNode::or(vec![
                PredicateNode::cmp("patient.age_years", CmpOp::Lt, 40),
                PredicateNode::and(vec![
                    PredicateNode::cmp("patient.age_years", CmpOp::Gt, 60),
                    PredicateNode::cmp("patient.hrt", CmpOp::Eq, false),
                ]),
            ])
        );
        let g = tr("find patients where not (age < 40 or hrt = true)").unwrap();
        assert!(matches!(g.predicate, PredicateNode::Not { .. }));
    }

    #[test]
    fn in_lists_and_string_coercion() {
        let q = tr("find images where view in (MLO, CC) and patient = 123").unwrap();
        assert_eq!(
            q.predicate,
            PredicateNode::and(vec![
                PredicateNode::is_in("image.view", vec!["MLO".into(), "CC".into()]),
                PredicateNode::cmp("patient.patient_id", CmpOp::Eq, "123"),
            ])
        );
        assert!(matches!(
            tr("find images where age = old"),
            Err(TranslateError::Parse { .. })
        ));
    }

    #[test]
    fn like_image_condition() {
        let q = tr("find patients where find one like it like image I1 threshold 0.8 in MLO").unwrap();
        let expected = PredicateNode::derived(FIND_ONE_LIKE_IT, like_params("I1", &[View::MLO]), CmpOp::Ge, 0.8);
        assert_eq!(q.predicate, expected);
        let q = tr("find images where similarity like image I9 threshold 1").unwrap();
        assert!(matches!(q.predicate, PredicateNode::Derived { .. }));
        assert!(tr("find images where view like image I9 threshold 0.5").is_err());
        assert!(tr("find images where similarity like image I9 threshold 1.5").is_err());
    }

    #[test]
    fn bare_find_matches_everything() {
        assert_eq!(tr("find studies").unwrap().predicate, PredicateNode::always());
    }

    #[test]
    fn raw_paths_and_derived_terms() {
        let q = tr("find studies where asymmetry >= 0.1 and study.diagnosis = cancer").unwrap();
        assert_eq!(
            q.predicate,
            PredicateNode::and(vec![
                PredicateNode::derived("density_asymmetry", Params::new(), CmpOp::Ge, 0.1),
                PredicateNode::cmp("study.diagnosis", CmpOp::Eq, "cancer"),
            ])
        );
    }

    #[test]
    fn translation_is_deterministic() {
        let text = "find images where age between 50 and 55 or hrt = true";
        assert_eq!(normalize(&tr(text).unwrap()), normalize(&tr(text).unwrap()));
    }

    #[test]
    fn dictionary_conflicts_rejected() {
        let mut d = TermDictionary::default();
        assert!(d.insert("AGE", TermTarget::Provider("x".into())).is_err());
        assert!(d
            .insert("Age", TermTarget::Attribute("patient.age_years".into()))
            .is_ok());
        assert!(d
            .insert("nothing", TermTarget::Attribute("patient.nothing".into()))
            .is_err());
        assert_eq!(d.version(), 1);
    }

    fn reference(age: i64, children: u32) -> PatientRecord {
        PatientRecord {
            patient_id: "P0".into(),
            age_years: age,
            children_count: children,
            age_first_pregnancy: (children > 0).then_some(25),
            age_last_pregnancy: (children > 0).then_some(31),
            hrt: false,
            hrt_start: None,
            site_id: site(),
        }
    }

    fn conjuncts(q: &FormalQuery) -> &[PredicateNode] {
        match &q.predicate {
            PredicateNode::And { children } => children,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn similarity_age_band() {
        let q = build_similarity_query(&reference(52, 2), &SimilarityCriteria::default(), &site()).unwrap();
        assert!(conjuncts(&q).contains(&PredicateNode::between("patient.age_years", 49, 55)));
        assert!(conjuncts(&q).contains(&PredicateNode::cmp("patient.patient_id", CmpOp::Ne, "P0")));
        assert_eq!(q.target, Entity::Patient);
    }

    #[test]
    fn similarity_children_bands() {
        let crit = SimilarityCriteria {
            match_children_band: true,
            ..Default::default()
        };
        let q = build_similarity_query(&reference(52, 2), &crit, &site()).unwrap();
        assert!(conjuncts(&q).contains(&PredicateNode::between("patient.children_count", 1, 2)));
        let q = build_similarity_query(&reference(52, 7), &crit, &site()).unwrap();
        assert!(conjuncts(&q).contains(&PredicateNode::cmp("patient.children_count", CmpOp::Ge, 5)));
        let q = build_similarity_query(&reference(52, 0), &crit, &site()).unwrap();
        assert!(conjuncts(&q).contains(&PredicateNode::cmp("patient.children_count", CmpOp::Eq, 0)));
    }

    #[test]
    fn bands_partition_counts() {
        for c in 0..200u32 {
            let hits = [(0, Some(0)), (1, Some(2)), (3, Some(4)), (5, None)]
                .iter()
                .filter(|(lo, hi)| c >= *lo && hi.is_none_or(|h| c <= h))
                .count();
            assert_eq!(hits, 1, "count {c}");
            let (lo, hi) = children_band(c);
            assert!(c >= lo && hi.is_none_or(|h| c <= h));
        }
    }

    #[test]
    fn pregnancy_band_needs_reference_ages() {
        let crit = SimilarityCriteria {
            match_pregnancy_ages_band: Some(2),
            ..Default::default()
        };
        assert!(matches!(
            build_similarity_query(&reference(52, 0), &crit, &site()),
            Err(TranslateError::Criteria(_))
        ));
        let q = build_similarity_query(&reference(52, 3), &crit, &site()).unwrap();
        assert!(conjuncts(&q).contains(&PredicateNode::between("patient.age_first_pregnancy", 23, 27)));
    }

    #[test]
    fn similarity_with_image_match() {
        let crit = SimilarityCriteria {
            image_match: Some(ImageMatch {
                reference_image: "I1".into(),
                threshold: 0.8,
                views: both_views(),
            }),
            ..Default::default()
        };
        let q = build_similarity_query(&reference(52, 1), &crit, &site()).unwrap();
        assert!(conjuncts(&q)
            .iter()
            .any(|p| matches!(p, PredicateNode::Derived { provider, .. } if provider == FIND_ONE_LIKE_IT)));
    }
}
