//! One site of the federation: its store, its view of the peers, the
//! knowledge cache and the query pipeline that ties them together.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};
use std::time::Duration;

use mammofed_core::analyser::{plan, PeerInfo, PeerStatus, QueryId, RegistryError, SiteRegistry};
use mammofed_core::cache::{CacheStats, KnowledgeCache, Lookup, DEFAULT_CAPACITY};
use mammofed_core::clinical::{AllocationError, AllocationState, Assignment, ReaderPair};
use mammofed_core::federation::{join_contributions, Envelope, ErrorCode, MergedResultSet, MissingReason, WireMessage};
use mammofed_core::local::{
    bind_reference_vectors, compile_statements, execute_local, run_local, CompileError, ProviderRegistry, ResultSet,
};
use mammofed_core::model::{IngestError, IngestReport, Record, SiteId, SiteStore};
use mammofed_core::query::{self, normalize, FormalQuery};
use mammofed_core::translator::{
    build_similarity_query, translate, SimilarityCriteria, TermDictionary, TranslateError,
};
use mammofed_core::xml::{parse_resultset, to_xml};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::transport::{Transport, TransportError};

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub site_id: SiteId,
    /// Shared secret carried in every inter-site frame.
    pub token: String,
    /// Deadline for each peer exchange.
    pub timeout: Duration,
    pub cache_capacity: usize,
    pub allocation_seed: u64,
    /// Seed for query ids; `None` draws one from the OS.
    pub id_seed: Option<u64>,
}

impl NodeConfig {
    pub fn new(site_id: SiteId) -> Self {
        NodeConfig {
            site_id,
            token: String::new(),
            timeout: Duration::from_secs(2),
            cache_capacity: DEFAULT_CAPACITY,
            allocation_seed: 42,
            id_seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheStatus {
    Hit,
    Miss,
}

impl CacheStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CacheStatus::Hit => "hit",
            CacheStatus::Miss => "miss",
        }
    }
}

/// A query answer as served to the client.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub merged: MergedResultSet,
    /// Exactly the bytes served; on a hit, the cached text.
    pub xml: String,
    pub cache: CacheStatus,
}

impl QueryOutcome {
    /// The merged JSON rendering plus the cache status.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = self.merged.to_json();
        v["cache"] = serde_json::Value::String(self.cache.as_str().into());
        v
    }

    /// `site:reason` pairs, comma separated.
    pub fn missing_header(&self) -> String {
        let parts: Vec<String> = self.merged.missing.iter().map(|(s, r)| format!("{s}:{r}")).collect();
        parts.join(",")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error(transparent)]
    Translate(#[from] TranslateError),
    #[error("invalid query: {0}")]
    Compile(#[from] CompileError),
    #[error("unknown patient {0}")]
    UnknownPatient(String),
    #[error("no site could answer: {0}")]
    AllFailed(String),
    #[error(transparent)]
    Join(#[from] mammofed_core::federation::JoinError),
}

/// Live reader-allocation result with the running counts.
#[derive(Debug, Clone, Serialize)]
pub struct AllocationView {
    #[serde(flatten)]
    pub assignment: Assignment,
    pub pair_counts: BTreeMap<ReaderPair, u64>,
}

pub struct Node {
    config: NodeConfig,
    store: RwLock<SiteStore>,
    registry: RwLock<SiteRegistry>,
    providers: ProviderRegistry,
    dictionary: TermDictionary,
    cache: Mutex<KnowledgeCache>,
    desk: Mutex<AllocationState>,
    ids: Mutex<ChaCha8Rng>,
    transport: Arc<dyn Transport>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("site", &self.config.site_id)
            .finish_non_exhaustive()
    }
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl Node {
    pub fn new(config: NodeConfig, peers: Vec<PeerInfo>, transport: Arc<dyn Transport>) -> Result<Self, RegistryError> {
        let registry = SiteRegistry::new(config.site_id.clone(), peers)?;
        let ids = match config.id_seed {
            Some(seed) => ChaCha8Rng::seed_from_u64(seed),
            None => ChaCha8Rng::from_entropy(),
        };
        Ok(Node {
            store: RwLock::new(SiteStore::new(config.site_id.clone())),
            registry: RwLock::new(registry),
            providers: ProviderRegistry::standard(),
            dictionary: TermDictionary::default(),
            cache: Mutex::new(KnowledgeCache::new(config.cache_capacity)),
            desk: Mutex::new(AllocationState::new(config.allocation_seed)),
            ids: Mutex::new(ids),
            transport,
            config,
        })
    }

    pub fn site_id(&self) -> &SiteId {
        &self.config.site_id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn dictionary(&self) -> &TermDictionary {
        &self.dictionary
    }

    /// Read snapshot of the store; ingestion waits until it is dropped.
    pub fn store(&self) -> RwLockReadGuard<'_, SiteStore> {
        self.store.read().unwrap_or_else(|p| p.into_inner())
    }

    pub fn data_version(&self) -> u64 {
        self.store().data_version()
    }

    pub fn ingest_jsonl(&self, text: &str) -> Result<IngestReport, IngestError> {
        let mut store = self.store.write().unwrap_or_else(|p| p.into_inner());
        store.ingest_records(Cursor::new(text))
    }

    pub fn ingest(&self, records: impl IntoIterator<Item = Record>) -> IngestReport {
        let mut store = self.store.write().unwrap_or_else(|p| p.into_inner());
        store.ingest_batch(records)
    }

    pub fn registry(&self) -> SiteRegistry {
        self.registry.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn set_peers(&self, peers: Vec<PeerInfo>) -> Result<(), RegistryError> {
        let reg = SiteRegistry::new(self.config.site_id.clone(), peers)?;
        *self.registry.write().unwrap_or_else(|p| p.into_inner()) = reg;
        Ok(())
    }

    pub fn cache_stats(&self) -> CacheStats {
        lock(&self.cache).stats()
    }

    pub fn allocate(&self, patient_id: &str) -> Result<AllocationView, AllocationError> {
        let mut desk = lock(&self.desk);
        let assignment = desk.allocate(patient_id)?;
        Ok(AllocationView {
            assignment,
            pair_counts: desk.pair_counts(),
        })
    }

    fn next_query_id(&self) -> u128 {
        lock(&self.ids).gen()
    }

    /// Translates DSL text into a query originating here.
    pub fn translate(&self, dsl: &str) -> Result<FormalQuery, NodeError> {
        Ok(translate(dsl, &self.dictionary, self.site_id())?)
    }

    pub fn query_dsl(&self, dsl: &str) -> Result<QueryOutcome, NodeError> {
        let q = self.translate(dsl)?;
        self.run_query(q)
    }

    /// Similar-case search around a patient held by this site.
    pub fn similar(&self, patient_id: &str, criteria: &SimilarityCriteria) -> Result<QueryOutcome, NodeError> {
        let reference = self
            .store()
            .patient(patient_id)
            .cloned()
            .ok_or_else(|| NodeError::UnknownPatient(patient_id.to_string()))?;
        let q = build_similarity_query(&reference, criteria, self.site_id())?;
        self.run_query(q)
    }

    /// Full pipeline for a client query: check it compiles here, bind
    /// reference images, consult the cache, fan out, join, and cache a
    /// complete answer.
    pub fn run_query(&self, mut q: FormalQuery) -> Result<QueryOutcome, NodeError> {
        q.scope.origin_site = self.site_id().clone();
        compile_statements(&q)?;
        bind_reference_vectors(&mut q.predicate, &self.store());
        let canonical = normalize(&q);

        let known = lock(&self.cache)
            .peek(canonical.key)
            .is_some_and(|e| e.canonical_text == canonical.canonical_text);
        let versions = if known && q.is_global() {
            self.probe_versions()
        } else {
            BTreeMap::from([(self.site_id().clone(), self.data_version())])
        };
        if let Lookup::Fresh(entry) = lock(&self.cache).lookup(&canonical, &versions) {
            return Ok(QueryOutcome {
                merged: entry.merged,
                xml: entry.merged_xml,
                cache: CacheStatus::Hit,
            });
        }

        let registry = self.registry();
        let mut ids = || self.next_query_id();
        let plan = plan(&q, &registry, &mut ids);
        let qid = plan.query_id;

        let (local, remote) = std::thread::scope(|s| {
            let handles: Vec<_> = plan
                .remote_parts
                .iter()
                .map(|(site, part)| {
                    let peer = registry
                        .peer(site)
                        .cloned()
                        .expect("planned peers come from the registry");
                    s.spawn(move || (peer.site_id.clone(), self.forward_query(&peer, part, qid)))
                })
                .collect();
            let local = {
                let store = self.store();
                run_local(&plan.local_part, &store, &self.providers, qid)
            };
            let remote: Vec<_> = handles
                .into_iter()
                .map(|h| h.join().expect("forwarding thread"))
                .collect();
            (local, remote)
        });

        let mut contributions = Vec::new();
        let mut missing = Vec::new();
        let mut local_error = None;
        match local {
            Ok(rs) => contributions.push(rs),
            Err(e) => {
                local_error = Some(e.to_string());
                missing.push((self.site_id().clone(), MissingReason::Refused));
            }
        }
        for (site, r) in remote {
            match r {
                Ok(rs) => contributions.push(rs),
                Err(reason) => missing.push((site, reason)),
            }
        }
        if contributions.is_empty() {
            let detail = local_error.unwrap_or_else(|| "every site is missing".into());
            return Err(NodeError::AllFailed(detail));
        }
        let merged = join_contributions(qid, self.site_id().clone(), contributions, missing)?;
        let xml = match lock(&self.cache).update(&canonical, &merged) {
            Ok(entry) => entry.merged_xml.clone(),
            Err(_) => merged.to_xml(),
        };
        Ok(QueryOutcome {
            merged,
            xml,
            cache: CacheStatus::Miss,
        })
    }

    fn envelope(&self, message: WireMessage) -> Vec<u8> {
        Envelope::new(self.config.token.clone(), message).encode()
    }

    fn exchange(&self, peer: &PeerInfo, message: WireMessage) -> Result<WireMessage, TransportError> {
        let reply = self
            .transport
            .exchange(self.site_id(), peer, &self.envelope(message), self.config.timeout)?;
        let env = Envelope::decode(&reply).map_err(|e| TransportError::Failed(e.to_string()))?;
        // A refusal carries the peer's own token, which may differ from ours.
        if env.token != self.config.token && !matches!(env.message, WireMessage::Error { .. }) {
            return Err(TransportError::Failed(format!(
                "reply from {} carries a foreign token",
                peer.site_id
            )));
        }
        Ok(env.message)
    }

    fn mark_peer(&self, site: &SiteId, status: PeerStatus, version: Option<u64>) {
        let mut reg = self.registry.write().unwrap_or_else(|p| p.into_inner());
        if let Some(p) = reg.peer_mut(site) {
            p.status = status;
            if version.is_some() {
                p.last_known_version = version;
            }
        }
    }

    /// Sends a hop-0 query to one peer and parses its answer. An ERROR reply
    /// counts as refused; a reply that does not fit the request counts as a
    /// transport failure.
    pub fn forward_query(
        &self,
        peer: &PeerInfo,
        q: &FormalQuery,
        query_id: QueryId,
    ) -> Result<ResultSet, MissingReason> {
        let msg = WireMessage::Query {
            query_id,
            hop_budget: q.scope.hop_budget,
            formal_query: query::encode(q),
        };
        let outcome = match self.exchange(peer, msg) {
            Err(e) => Err(e.reason()),
            Ok(WireMessage::Result {
                query_id: got,
                xml,
                data_version,
            }) if got == query_id => match parse_resultset(&xml) {
                Ok(p) if p.header.site_id == peer.site_id && p.header.query_id == query_id => {
                    let mut rs = p.into_result_set();
                    rs.source_version = data_version;
                    Ok(rs)
                }
                _ => Err(MissingReason::Transport),
            },
            Ok(WireMessage::Error { .. }) => Err(MissingReason::Refused),
            Ok(_) => Err(MissingReason::Transport),
        };
        match &outcome {
            Ok(rs) => self.mark_peer(&peer.site_id, PeerStatus::Up, Some(rs.source_version)),
            Err(_) => self.mark_peer(&peer.site_id, PeerStatus::Down, None),
        }
        outcome
    }

    /// Current data version of this site and of every peer that answers a
    /// probe. Unreachable peers are left out.
    pub fn probe_versions(&self) -> BTreeMap<SiteId, u64> {
        let peers = self.registry().peers;
        let answers: Vec<(SiteId, Option<u64>)> = std::thread::scope(|s| {
            let handles: Vec<_> = peers
                .iter()
                .map(|peer| {
                    s.spawn(move || {
                        let v = match self.exchange(peer, WireMessage::VersionProbe) {
                            Ok(WireMessage::Version { site_id, data_version }) if site_id == peer.site_id => {
                                Some(data_version)
                            }
                            _ => None,
                        };
                        (peer.site_id.clone(), v)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("probe thread")).collect()
        });
        let mut out = BTreeMap::from([(self.site_id().clone(), self.data_version())]);
        for (site, v) in answers {
            match v {
                Some(v) => {
                    self.mark_peer(&site, PeerStatus::Up, Some(v));
                    out.insert(site, v);
                }
                None => self.mark_peer(&site, PeerStatus::Down, None),
            }
        }
        out
    }

    /// Answers one request from a peer. Never panics on bad input; every
    /// request gets exactly one reply.
    pub fn handle_incoming(&self, request: Envelope) -> WireMessage {
        if request.token != self.config.token {
            return WireMessage::error(request.message.query_id(), ErrorCode::Unauthorized, "token mismatch");
        }
        match request.message {
            WireMessage::VersionProbe => WireMessage::Version {
                site_id: self.site_id().clone(),
                data_version: self.data_version(),
            },
            WireMessage::Query {
                query_id,
                hop_budget,
                formal_query,
            } => {
                if hop_budget != 0 {
                    return WireMessage::error(
                        Some(query_id),
                        ErrorCode::HopViolation,
                        format!("forwarded queries must carry hop_budget 0, got {hop_budget}"),
                    );
                }
                let q = match query::decode(&formal_query) {
                    Ok(q) => q,
                    Err(e) => return WireMessage::error(Some(query_id), ErrorCode::BadMessage, e.to_string()),
                };
                if q.scope.hop_budget != 0 {
                    return WireMessage::error(
                        Some(query_id),
                        ErrorCode::HopViolation,
                        "formal query scope must carry hop_budget 0",
                    );
                }
                let plan = match compile_statements(&q) {
                    Ok(p) => p,
                    Err(e) => return WireMessage::error(Some(query_id), ErrorCode::QueryFailed, e.to_string()),
                };
                let store = self.store();
                match execute_local(&plan, &store, &self.providers, query_id) {
                    Ok(rs) => WireMessage::Result {
                        query_id,
                        xml: to_xml(&rs),
                        data_version: rs.source_version,
                    },
                    Err(e) => WireMessage::error(Some(query_id), ErrorCode::QueryFailed, e.to_string()),
                }
            }
            other => WireMessage::error(
                other.query_id(),
                ErrorCode::BadMessage,
                format!("{} is not a request", other.kind()),
            ),
        }
    }

    /// Byte-level form of [`handle_incoming`](Self::handle_incoming).
    pub fn handle_frame(&self, body: &[u8]) -> Vec<u8> {
        let reply = match Envelope::decode(body) {
            Ok(env) => self.handle_incoming(env),
            Err(e) => WireMessage::error(None, ErrorCode::BadMessage, e.to_string()),
        };
        self.envelope(reply)
    }
}
