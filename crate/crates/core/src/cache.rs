//! Knowledge cache: merged results of earlier queries, reused while every
//! contributing site still reports the data version the result was built from.

use std::collections::BTreeMap;
use std::num::NonZeroUsize;

use chrono::{DateTime, Utc};
use lru::LruCache;
use serde::Serialize;

use crate::federation::MergedResultSet;
use crate::model::SiteId;
use crate::query::CanonicalQuery;

pub const DEFAULT_CAPACITY: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeEntry {
    pub key: u64,
    pub canonical_text: String,
    pub merged_xml: String,
    pub merged: MergedResultSet,
    /// Data version of every site that contributed, the local site included.
    pub version_snapshot: BTreeMap<SiteId, u64>,
    pub created_at: DateTime<Utc>,
    pub hit_count: u64,
}

impl KnowledgeEntry {
    pub fn is_fresh(&self, current: &BTreeMap<SiteId, u64>) -> bool {
        self.version_snapshot
            .iter()
            .all(|(site, v)| current.get(site) == Some(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Lookup {
    Fresh(KnowledgeEntry),
    Stale(KnowledgeEntry),
    Miss,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: usize,
    pub capacity: usize,
    pub hits: u64,
    pub misses: u64,
    pub stale: u64,
    pub evictions: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CacheError {
    #[error("partial result (missing {0}) is not cached")]
    Partial(String),
}

#[derive(Debug)]
pub struct KnowledgeCache {
    entries: LruCache<u64, KnowledgeEntry>,
    stats: CacheStats,
}

impl Default for KnowledgeCache {
    fn default() -> Self {
        KnowledgeCache::new(DEFAULT_CAPACITY)
    }
}

impl KnowledgeCache {
    /// A capacity of 0 is treated as 1.
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity).unwrap_or(NonZeroUsize::MIN);
        KnowledgeCache {
            entries: LruCache::new(cap),
            stats: CacheStats {
                capacity: cap.get(),
                ..CacheStats::default()
            },
        }
    }

    /// Classifies the cached entry for `query` against the current versions.
    /// A fresh hit bumps the entry's hit count. Entries whose canonical text
    /// differs (a key collision) count as a miss.
    pub fn lookup(&mut self, query: &CanonicalQuery, current: &BTreeMap<SiteId, u64>) -> Lookup {
        match self.entries.get_mut(&query.key) {
            Some(e) if e.canonical_text == query.canonical_text => {
                if e.is_fresh(current) {
                    e.hit_count += 1;
                    self.stats.hits += 1;
                    Lookup::Fresh(e.clone())
                } else {
                    self.stats.stale += 1;
                    Lookup::Stale(e.clone())
                }
            }
            _ => {
                self.stats.misses += 1;
                Lookup::Miss
            }
        }
    }

    /// Stores a complete result, replacing any earlier entry for the query.
    pub fn update(&mut self, query: &CanonicalQuery, merged: &MergedResultSet) -> Result<&KnowledgeEntry, CacheError> {
        if merged.is_partial() {
            let sites: Vec<String> = merged.missing.iter().map(|(s, _)| s.to_string()).collect();
            return Err(CacheError::Partial(sites.join(",")));
        }
        let entry = KnowledgeEntry {
            key: query.key,
            canonical_text: query.canonical_text.clone(),
            merged_xml: merged.to_xml(),
            merged: merged.clone(),
            version_snapshot: merged.version_snapshot(),
            created_at: Utc::now(),
            hit_count: 0,
        };
        if let Some((k, _)) = self.entries.push(query.key, entry) {
            if k != query.key {
                self.stats.evictions += 1;
            }
        }
        Ok(self.entries.peek(&query.key).expect("just inserted"))
    }

    pub fn peek(&self, key: u64) -> Option<&KnowledgeEntry> {
        self.entries.peek(&key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            entries: self.entries.len(),
            ..self.stats
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyser::QueryId;
    use crate::federation::{join_results, MissingReason};
    use crate::local::ResultSet;
    use crate::model::Entity;
    use crate::query::{normalize, FormalQuery, PredicateNode};

    fn key(n: i64) -> CanonicalQuery {
        normalize(&FormalQuery::new(
            Entity::Patient,
            PredicateNode::cmp("patient.age_years", crate::query::CmpOp::Eq, n),
            SiteId::new("A"),
            1,
        ))
    }

    fn rs(site: &str, v: u64) -> ResultSet {
        ResultSet::empty(QueryId(1), SiteId::new(site), v)
    }

    fn merged(missing: bool) -> MergedResultSet {
        let m = if missing {
            vec![(SiteId::new("C"), MissingReason::Timeout)]
        } else {
            vec![]
        };
        join_results(rs("A", 1), vec![rs("B", 2)], m).unwrap()
    }

    fn versions(pairs: &[(&str, u64)]) -> BTreeMap<SiteId, u64> {
        pairs.iter().map(|(s, v)| (SiteId::new(*s), *v)).collect()
    }

    #[test]
    fn miss_then_fresh_then_stale() {
        let mut c = KnowledgeCache::new(4);
        let k = key(50);
        assert_eq!(c.lookup(&k, &versions(&[("A", 1), ("B", 2)])), Lookup::Miss);
        let e = c.update(&k, &merged(false)).unwrap();
        assert_eq!(e.version_snapshot, versions(&[("A", 1), ("B", 2)]));
        match c.lookup(&k, &versions(&[("A", 1), ("B", 2)])) {
            Lookup::Fresh(e) => assert_eq!(e.hit_count, 1),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            c.lookup(&k, &versions(&[("A", 1), ("B", 3)])),
            Lookup::Stale(_)
        ));
        assert!(matches!(c.lookup(&k, &versions(&[("A", 1)])), Lookup::Stale(_)));
        let s = c.stats();
        assert_eq!((s.entries, s.hits, s.misses, s.stale), (1, 1, 1, 2));
    }

    #[test]
    fn partial_results_not_cached() {
        let mut c = KnowledgeCache::new(4);
        assert!(c.update(&key(1), &merged(true)).is_err());
        assert!(c.is_empty());
    }

    #[test]
    fn update_replaces_and_resets_hits() {
        let mut c = KnowledgeCache::new(4);
        let k = key(1);
        c.update(&k, &merged(false)).unwrap();
        c.lookup(&k, &versions(&[("A", 1), ("B", 2)]));
        assert_eq!(c.update(&k, &merged(false)).unwrap().hit_count, 0);
        assert_eq!(c.len(), 1);
        assert_eq!(c.stats().evictions, 0);
    }

    #[test]
    fn lru_eviction_counts() {
        let mut c = KnowledgeCache::new(2);
        for n in 0..3 {
            c.update(&key(n), &merged(false)).unwrap();
        }
        assert_eq!(c.stats().evictions, 1);
        assert!(c.peek(key(0).key).is_none());
        assert_eq!(c.lookup(&key(0), &versions(&[("A", 1), ("B", 2)])), Lookup::Miss);
    }

    #[test]
    fn collision_is_a_miss() {
        let mut c = KnowledgeCache::new(2);
        let k = key(1);
        c.update(&k, &merged(false)).unwrap();
        let fake = CanonicalQuery {
            canonical_text: "other".into(),
            key: k.key,
        };
        assert_eq!(c.lookup(&fake, &versions(&[("A", 1), ("B", 2)])), Lookup::Miss);
    }
}
