//! Local query handler: compiles a formal query into relational steps over a
//! [`SiteStore`], runs them, and hands back a sorted, projected result set.

pub mod providers;

use std::fmt;

use crate::analyser::QueryId;
use crate::model::{attribute, AttributeDef, Entity, SiteId, SiteStore, Value};
use crate::query::{canonical_predicate, CmpOp, FormalQuery, Params, PredicateNode, QueryError};

pub use providers::{
    bind_reference_vectors, similarity, DerivedProvider, ProviderError, ProviderRegistry, RecordContext,
    DENSITY_ASYMMETRY, FIND_ONE_LIKE_IT,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CompileError {
    #[error("unknown attribute path `{0}`")]
    UnknownAttribute(String),
    #[error("attribute `{path}` is not reachable from {target} records")]
    Unreachable { path: String, target: Entity },
    #[error(transparent)]
    Invalid(#[from] QueryError),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExecError {
    #[error("no provider registered as `{0}`")]
    MissingProvider(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// A predicate with attribute paths resolved against the schema.
#[derive(Debug, Clone, PartialEq)]
enum Compiled {
    And(Vec<Compiled>),
    Or(Vec<Compiled>),
    Not(Box<Compiled>),
    Cmp {
        def: &'static AttributeDef,
        op: CmpOp,
        values: Vec<Value>,
    },
    Derived {
        provider: String,
        params: Params,
        op: CmpOp,
        value: f64,
    },
}

/// One relational step of a [`StatementPlan`].
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Scan(Entity),
    /// Key-join from the scanned entity up to `to`, through `chain`.
    ResolvePath {
        to: Entity,
        chain: Vec<Entity>,
    },
    Filter(FilterStep),
    DerivedFilter(FilterStep),
    Project(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    pub predicate: PredicateNode,
    compiled: Compiled,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Scan(e) => write!(f, "Scan({})", e.table()),
            Step::ResolvePath { chain, .. } => {
                let names: Vec<&str> = chain.iter().map(|e| e.name()).collect();
                write!(f, "ResolvePath({})", names.join("->"))
            }
            Step::Filter(s) => write!(f, "Filter({})", canonical_predicate(&s.predicate)),
            Step::DerivedFilter(s) => {
                write!(f, "DerivedFilter({})", canonical_predicate(&s.predicate))
            }
            Step::Project(p) => write!(f, "Project({})", p.join(", ")),
        }
    }
}

/// Ordered steps: scan, key-joins, simple filters, derived filters, projection.
#[derive(Debug, Clone, PartialEq)]
pub struct StatementPlan {
    pub target: Entity,
    pub steps: Vec<Step>,
}

impl fmt::Display for StatementPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str(" ; ")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

impl StatementPlan {
    /// Provider ids used by the plan's derived filters.
    pub fn providers(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for step in &self.steps {
            if let Step::DerivedFilter(s) = step {
                s.predicate.visit(&mut |n| {
                    if let PredicateNode::Derived { provider, .. } = n {
                        if !out.contains(&provider.as_str()) {
                            out.push(provider.as_str());
                        }
                    }
                });
            }
        }
        out
    }
}

fn resolve_path(path: &str, target: Entity) -> Result<&'static AttributeDef, CompileError> {
    let def = attribute(path).ok_or_else(|| CompileError::UnknownAttribute(path.to_string()))?;
    if def.entity != target && target.chain_to(def.entity).is_none() {
        return Err(CompileError::Unreachable {
            path: path.to_string(),
            target,
        });
    }
    Ok(def)
}

fn compile_predicate(node: &PredicateNode, target: Entity) -> Result<Compiled, CompileError> {
    Ok(match node {
        PredicateNode::And { children } => Compiled::And(
            children
                .iter()
                .map(|c| compile_predicate(c, target))
                .collect::<Result<_, _>>()?,
        ),
        PredicateNode::Or { children } => Compiled::Or(
            children
                .iter()
                .map(|c| compile_predicate(c, target))
                .collect::<Result<_, _>>()?,
        ),
        PredicateNode::Not { child } => Compiled::Not(Box::new(compile_predicate(child, target)?)),
        PredicateNode::Cmp { attr, op, values } => Compiled::Cmp {
            def: resolve_path(attr, target)?,
            op: *op,
            values: values.iter().map(|l| l.to_value()).collect(),
        },
        PredicateNode::Derived {
            provider,
            params,
            op,
            value,
        } => Compiled::Derived {
            provider: provider.clone(),
            params: params.clone(),
            op: *op,
            value: value
                .as_f64()
                .ok_or_else(|| QueryError::Invalid("derived literal must be numeric".into()))?,
        },
    })
}

fn filter_step(predicate: PredicateNode, target: Entity) -> Result<FilterStep, CompileError> {
    let compiled = compile_predicate(&predicate, target)?;
    Ok(FilterStep { predicate, compiled })
}

/// Compiles `q` for execution against a single store.
///
/// Top-level conjuncts without derived comparisons become `Filter` steps; the
/// rest are evaluated together by one `DerivedFilter` afterwards. A predicate
/// that is not a conjunction goes to a single step.
pub fn compile_statements(q: &FormalQuery) -> Result<StatementPlan, CompileError> {
    q.validate()?;
    let target = q.target;
    let projection = q.projection.paths(target);

    let mut foreign: Vec<Entity> = Vec::new();
    let mut note = |path: &str| -> Result<(), CompileError> {
        let def = resolve_path(path, target)?;
        if def.entity != target && !foreign.contains(&def.entity) {
            foreign.push(def.entity);
        }
        Ok(())
    };
    q.predicate.attribute_paths().into_iter().try_for_each(&mut note)?;
    projection.iter().try_for_each(|p| note(p))?;
    foreign.sort();

    let mut steps = vec![Step::Scan(target)];
    for to in foreign {
        let mut chain = vec![target];
        chain.extend(target.chain_to(to).expect("checked reachable"));
        steps.push(Step::ResolvePath { to, chain });
    }

    let conjuncts = match &q.predicate {
        PredicateNode::And { children } => children.clone(),
        other => vec![other.clone()],
    };
    let (derived, simple): (Vec<_>, Vec<_>) = conjuncts.into_iter().partition(PredicateNode::contains_derived);
    for c in simple {
        steps.push(Step::Filter(filter_step(c, target)?));
    }
    match derived.len() {
        0 => {}
        1 => steps.push(Step::DerivedFilter(filter_step(
            derived.into_iter().next().unwrap(),
            target,
        )?)),
        _ => steps.push(Step::DerivedFilter(filter_step(PredicateNode::and(derived), target)?)),
    }
    steps.push(Step::Project(projection));
    Ok(StatementPlan { target, steps })
}

/// One result row. Fields with no stored value are left out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    pub entity: Entity,
    pub id: String,
    pub site_id: SiteId,
    pub fields: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultSet {
    pub query_id: QueryId,
    pub site_id: SiteId,
    pub rows: Vec<Row>,
    pub source_version: u64,
    /// Records dropped because a derived value was undefined.
    pub skipped: u64,
}

impl ResultSet {
    pub fn empty(query_id: QueryId, site_id: SiteId, source_version: u64) -> Self {
        ResultSet {
            query_id,
            site_id,
            rows: Vec::new(),
            source_version,
            skipped: 0,
        }
    }
}

/// A scanned record joined with its ancestors, indexed by entity.
#[derive(Clone)]
struct Tuple<'a> {
    id: &'a str,
    slots: [Option<&'a str>; 4],
}

fn slot(e: Entity) -> usize {
    e as usize
}

fn parent_id(store: &SiteStore, entity: Entity, id: &str) -> Option<String> {
    match entity {
        Entity::Patient => None,
        Entity::Study => store.study(id).map(|s| s.patient_id.clone()),
        Entity::Image => store.image(id).map(|i| i.study_id.clone()),
        Entity::Annotation => store.annotation(id).map(|a| a.image_id.clone()),
    }
}

fn field(store: &SiteStore, def: &AttributeDef, id: &str) -> Option<Value> {
    match def.entity {
        Entity::Patient => store.patient(id)?.field(def.field),
        Entity::Study => store.study(id)?.field(def.field),
        Entity::Image => store.image(id)?.field(def.field),
        Entity::Annotation => store.annotation(id)?.field(def.field),
    }
}

/// Three-valued truth for predicates that may hit undefined derived values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truth {
    True,
    False,
    Unknown,
}

impl Truth {
    fn from_bool(b: bool) -> Self {
        if b {
            Truth::True
        } else {
            Truth::False
        }
    }
}

/// Comparison of a stored value against literal operands. An absent value
/// satisfies nothing.
pub fn cmp_holds(v: Option<&Value>, op: CmpOp, values: &[Value]) -> bool {
    let Some(v) = v else { return false };
    match op {
        CmpOp::Between => {
            let ge = v.compare(&values[0]).is_some_and(|o| o.is_ge());
            let le = v.compare(&values[1]).is_some_and(|o| o.is_le());
            ge && le
        }
        CmpOp::In => values.iter().any(|l| v.compare(l).is_some_and(|o| o.is_eq())),
        _ => v.compare(&values[0]).is_some_and(|o| op.holds(o)),
    }
}

struct Evaluator<'a> {
    store: &'a SiteStore,
    providers: &'a ProviderRegistry,
    target: Entity,
}

impl<'a> Evaluator<'a> {
    fn eval(&self, c: &Compiled, t: &Tuple<'a>) -> Result<Truth, ExecError> {
        Ok(match c {
            Compiled::And(children) => {
                let mut acc = Truth::True;
                for ch in children {
                    match self.eval(ch, t)? {
                        Truth::False => return Ok(Truth::False),
                        Truth::Unknown => acc = Truth::Unknown,
                        Truth::True => {}
                    }
                }
                acc
            }
            Compiled::Or(children) => {
                let mut acc = Truth::False;
                for ch in children {
                    match self.eval(ch, t)? {
                        Truth::True => return Ok(Truth::True),
                        Truth::Unknown => acc = Truth::Unknown,
                        Truth::False => {}
                    }
                }
                acc
            }
            Compiled::Not(child) => match self.eval(child, t)? {
                Truth::True => Truth::False,
                Truth::False => Truth::True,
                Truth::Unknown => Truth::Unknown,
            },
            Compiled::Cmp { def, op, values } => {
                let v = t.slots[slot(def.entity)].and_then(|id| field(self.store, def, id));
                Truth::from_bool(cmp_holds(v.as_ref(), *op, values))
            }
            Compiled::Derived {
                provider,
                params,
                op,
                value,
            } => {
                let p = self
                    .providers
                    .get(provider)
                    .ok_or_else(|| ExecError::MissingProvider(provider.clone()))?;
                match p.evaluate(&RecordContext::new(self.store, self.target, t.id), params)? {
                    None => Truth::Unknown,
                    Some(x) => Truth::from_bool(x.partial_cmp(value).is_some_and(|o| op.holds(o))),
                }
            }
        })
    }
}

/// Runs `plan` against one snapshot of `store`.
pub fn execute_local(
    plan: &StatementPlan,
    store: &SiteStore,
    providers: &ProviderRegistry,
    query_id: QueryId,
) -> Result<ResultSet, ExecError> {
    if let Some(missing) = plan.providers().into_iter().find(|p| !providers.contains(p)) {
        return Err(ExecError::MissingProvider(missing.to_string()));
    }
    let ev = Evaluator {
        store,
        providers,
        target: plan.target,
    };
    let mut tuples: Vec<Tuple<'_>> = Vec::new();
    let mut skipped = 0u64;
    let mut projection: &[String] = &[];

    for step in &plan.steps {
        match step {
            Step::Scan(e) => {
                tuples = store
                    .ids(*e)
                    .into_iter()
                    .map(|id| {
                        let mut slots = [None; 4];
                        slots[slot(*e)] = Some(id);
                        Tuple { id, slots }
                    })
                    .collect();
            }
            Step::ResolvePath { chain, .. } => {
                for t in &mut tuples {
                    for pair in chain.windows(2) {
                        let (from, to) = (pair[0], pair[1]);
                        if t.slots[slot(to)].is_some() {
                            continue;
                        }
                        let parent = t.slots[slot(from)].and_then(|id| parent_id(store, from, id));
                        t.slots[slot(to)] = parent.and_then(|pid| store.stored_id(to, &pid));
                    }
                }
            }
            Step::Filter(f) => {
                let mut kept = Vec::with_capacity(tuples.len());
                for t in tuples {
                    if ev.eval(&f.compiled, &t)? == Truth::True {
                        kept.push(t);
                    }
                }
                tuples = kept;
            }
            Step::DerivedFilter(f) => {
                let mut kept = Vec::with_capacity(tuples.len());
                for t in tuples {
                    match ev.eval(&f.compiled, &t)? {
                        Truth::True => kept.push(t),
                        Truth::Unknown => skipped += 1,
                        Truth::False => {}
                    }
                }
                tuples = kept;
            }
            Step::Project(p) => projection = p,
        }
    }

    let defs: Vec<(&String, &AttributeDef)> = projection.iter().filter_map(|p| attribute(p).map(|d| (p, d))).collect();
    let mut rows: Vec<Row> = tuples
        .iter()
        .map(|t| Row {
            entity: plan.target,
            id: t.id.to_string(),
            site_id: store.site_id().clone(),
            fields: defs
                .iter()
                .filter_map(|(p, d)| {
                    let v = t.slots[slot(d.entity)].and_then(|id| field(store, d, id))?;
                    Some(((*p).clone(), v.render()))
                })
                .collect(),
        })
        .collect();
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(ResultSet {
        query_id,
        site_id: store.site_id().clone(),
        rows,
        source_version: store.data_version(),
        skipped,
    })
}

/// Compiles and runs `q` in one go.
pub fn run_local(
    q: &FormalQuery,
    store: &SiteStore,
    providers: &ProviderRegistry,
    query_id: QueryId,
) -> Result<ResultSet, LocalError> {
    let plan = compile_statements(q)?;
    Ok(execute_local(&plan, store, providers, query_id)?)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LocalError {
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Exec(#[from] ExecError),
}
