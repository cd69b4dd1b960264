//! Decomposition of a formal query into a local part and per-peer remote parts.
//!
//! Every site holds the same schema, so decomposition is a broadcast: each
//! sub-query carries the input predicate unchanged, and every sub-query has a
//! hop budget of 0 so a receiving site never fans out again.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::SiteId;
use crate::query::FormalQuery;

/// 128-bit query identifier rendered as `Q-<32 lowercase hex digits>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QueryId(pub u128);

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q-{:032x}", self.0)
    }
}

impl FromStr for QueryId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let hex = s
            .strip_prefix("Q-")
            .ok_or_else(|| format!("query id `{s}` lacks the Q- prefix"))?;
        if hex.len() != 32 {
            return Err(format!("query id `{s}` must carry 32 hex digits"));
        }
        u128::from_str_radix(hex, 16)
            .map(QueryId)
            .map_err(|e| format!("query id `{s}`: {e}"))
    }
}

impl Serialize for QueryId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QueryId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Anything that can hand out 128 random bits for query ids.
pub trait QueryIdSource {
    fn next_u128(&mut self) -> u128;
}

impl<F: FnMut() -> u128> QueryIdSource for F {
    fn next_u128(&mut self) -> u128 {
        self()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeerStatus {
    Up,
    Down,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerInfo {
    pub site_id: SiteId,
    /// `host:port` of the peer's inter-site listener.
    pub address: String,
    pub last_known_version: Option<u64>,
    pub status: PeerStatus,
}

impl PeerInfo {
    pub fn new(site_id: SiteId, address: impl Into<String>) -> Self {
        PeerInfo {
            site_id,
            address: address.into(),
            last_known_version: None,
            status: PeerStatus::Unknown,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RegistryError {
    #[error("site {0} listed more than once")]
    DuplicateSite(SiteId),
    #[error("local site {0} cannot be its own peer")]
    SelfPeer(SiteId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteRegistry {
    pub local_site: SiteId,
    pub peers: Vec<PeerInfo>,
}

impl SiteRegistry {
    pub fn new(local_site: SiteId, peers: Vec<PeerInfo>) -> Result<Self, RegistryError> {
        let reg = SiteRegistry { local_site, peers };
        reg.check()?;
        Ok(reg)
    }

    pub fn check(&self) -> Result<(), RegistryError> {
        let mut seen = std::collections::HashSet::new();
        for p in &self.peers {
            if p.site_id == self.local_site {
                return Err(RegistryError::SelfPeer(p.site_id.clone()));
            }
            if !seen.insert(&p.site_id) {
                return Err(RegistryError::DuplicateSite(p.site_id.clone()));
            }
        }
        Ok(())
    }

    pub fn peer(&self, site: &SiteId) -> Option<&PeerInfo> {
        self.peers.iter().find(|p| &p.site_id == site)
    }

    pub fn peer_mut(&mut self, site: &SiteId) -> Option<&mut PeerInfo> {
        self.peers.iter_mut().find(|p| &p.site_id == site)
    }
}

/// How per-site results are combined: rows deduplicated on
/// `(site_id, entity, id)` and ordered lexicographically by that key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct JoinSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct QueryPlan {
    pub query_id: QueryId,
    pub local_part: FormalQuery,
    pub remote_parts: Vec<(SiteId, FormalQuery)>,
    pub join_spec: JoinSpec,
}

/// Sites to leave out of the fan-out. Empty by default, which is the only
/// setting under which a global answer covers every peer.
#[derive(Debug, Clone, Default)]
pub struct PlanHints {
    pub exclude_sites: Vec<SiteId>,
}

/// Plans `q` at the registry's local site.
///
/// Peers marked down are still planned; their failure surfaces at dispatch.
pub fn plan(q: &FormalQuery, reg: &SiteRegistry, ids: &mut impl QueryIdSource) -> QueryPlan {
    plan_with_hints(q, reg, ids, &PlanHints::default())
}

pub fn plan_with_hints(
    q: &FormalQuery,
    reg: &SiteRegistry,
    ids: &mut impl QueryIdSource,
    hints: &PlanHints,
) -> QueryPlan {
    let terminal = q.with_hop_budget(0);
    let remote_parts = if q.is_global() {
        reg.peers
            .iter()
            .filter(|p| !hints.exclude_sites.contains(&p.site_id))
            .map(|p| (p.site_id.clone(), terminal.clone()))
            .collect()
    } else {
        Vec::new()
    };
    QueryPlan {
        query_id: QueryId(ids.next_u128()),
        local_part: terminal,
        remote_parts,
        join_spec: JoinSpec,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Entity;
    use crate::query::{canonical_predicate, PredicateNode};

    fn reg(peers: &[&str]) -> SiteRegistry {
        SiteRegistry::new(
            SiteId::new("A"),
            peers
                .iter()
                .map(|p| PeerInfo::new(SiteId::new(*p), "127.0.0.1:1"))
                .collect(),
        )
        .unwrap()
    }

    fn query(hop: u8) -> FormalQuery {
        FormalQuery::new(
            Entity::Image,
            PredicateNode::between("patient.age_years", 50, 55),
            SiteId::new("A"),
            hop,
        )
    }

    fn ids() -> impl FnMut() -> u128 {
        let mut n = 0u128;
        move || {
            n += 1;
            n
        }
    }

    #[test]
    fn global_query_fans_out_to_every_peer() {
        let mut reg = reg(&["B", "C"]);
        reg.peers[1].status = PeerStatus::Down;
        let p = plan(&query(1), &reg, &mut ids());
        assert_eq!(p.local_part.scope.hop_budget, 0);
        let sites: Vec<_> = p.remote_parts.iter().map(|(s, _)| s.as_str()).collect();
        assert_eq!(sites, ["B", "C"]);
        for (_, part) in &p.remote_parts {
            assert_eq!(part.scope.hop_budget, 0);
            assert_eq!(
                canonical_predicate(&part.predicate),
                canonical_predicate(&query(1).predicate)
            );
        }
    }

    #[test]
    fn forwarded_query_stays_local() {
        assert!(plan(&query(0), &reg(&["B", "C"]), &mut ids()).remote_parts.is_empty());
    }

    #[test]
    fn no_peers_no_remote_parts() {
        assert!(plan(&query(1), &reg(&[]), &mut ids()).remote_parts.is_empty());
    }

    #[test]
    fn exclusion_hint() {
        let hints = PlanHints {
            exclude_sites: vec![SiteId::new("B")],
        };
        let p = plan_with_hints(&query(1), &reg(&["B", "C"]), &mut ids(), &hints);
        assert_eq!(p.remote_parts.len(), 1);
    }

    #[test]
    fn query_id_text_form() {
        let id = QueryId(0xabc);
        assert_eq!(id.to_string(), "Q-00000000000000000000000000000abc");
        assert_eq!(id.to_string().parse::<QueryId>().unwrap(), id);
        assert!("Q-12".parse::<QueryId>().is_err());
        assert!("X-00000000000000000000000000000abc".parse::<QueryId>().is_err());
    }

    #[test]
    fn registry_rejects_self_and_duplicates() {
        assert!(SiteRegistry::new(SiteId::new("A"), vec![PeerInfo::new(SiteId::new("A"), "x")]).is_err());
        assert!(SiteRegistry::new(
            SiteId::new("A"),
            vec![
                PeerInfo::new(SiteId::new("B"), "x"),
                PeerInfo::new(SiteId::new("B"), "y")
            ]
        )
        .is_err());
    }
}
