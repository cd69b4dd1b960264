//! Shared fixtures for the benchmarks.

use mammofed_core::analyser::QueryId;
use mammofed_core::local::{execute_local, ProviderRegistry, ResultSet};
use mammofed_core::model::{Rect, SiteId, SiteStore};
use mammofed_core::query::FormalQuery;
use mammofed_core::testing::{random_dataset, random_query, site_names};
use mammofed_core::translator::{translate, TermDictionary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stores for `k` sites with up to `records` records each.
pub fn stores(k: usize, records: usize) -> Vec<SiteStore> {
    random_dataset(&mut rng(1), k, records).stores()
}

/// A formal query from DSL, originating at site A.
pub fn query(dsl: &str) -> FormalQuery {
    translate(dsl, &TermDictionary::default(), &SiteId::new("A")).expect("benchmark query translates")
}

/// Random predicate trees of the given depth.
pub fn random_queries(n: usize, depth: usize) -> Vec<FormalQuery> {
    let mut r = rng(2);
    let sites = site_names(3);
    (0..n).map(|_| random_query(&mut r, &sites, depth)).collect()
}

/// One result set per store for the same query.
pub fn result_sets(stores: &[SiteStore], q: &FormalQuery) -> Vec<ResultSet> {
    let plan = mammofed_core::local::compile_statements(q).expect("benchmark query compiles");
    let providers = ProviderRegistry::standard();
    stores
        .iter()
        .map(|s| execute_local(&plan, s, &providers, QueryId(7)).expect("benchmark query runs"))
        .collect()
}

/// Integer-millimetre rectangles inside a 200 mm square.
pub fn rects(r: &mut impl Rng, n: usize) -> Vec<Rect> {
    (0..n)
        .map(|_| {
            let x0 = r.gen_range(0..180) as f64;
            let y0 = r.gen_range(0..180) as f64;
            Rect::new(x0, y0, x0 + r.gen_range(1..20) as f64, y0 + r.gen_range(1..20) as f64)
        })
        .collect()
}
