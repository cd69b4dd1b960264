//! In-process network simulator: builds a full mesh of nodes from a
//! configuration file, injects latency and faults, records every frame and
//! replays scripted scenarios.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use mammofed_core::analyser::PeerInfo;
use mammofed_core::federation::{Envelope, WireMessage};
use mammofed_core::model::{IngestReport, Record, SiteId};
use mammofed_core::query::{self, FormalQuery};
use mammofed_core::xml::parse_resultset;
use serde::{Deserialize, Serialize};

use crate::node::{CacheStatus, Node, NodeConfig, QueryOutcome};
use crate::server::NodeServer;
use crate::transport::{InProcessTransport, RoutingTransport, TcpTransport, Transport, TransportError};

fn default_token() -> String {
    "mammofed".into()
}

fn default_timeout_ms() -> u64 {
    2000
}

fn default_capacity() -> usize {
    mammofed_core::cache::DEFAULT_CAPACITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub site_id: SiteId,
    /// Inter-site TCP port; without one the site is reached in-process.
    #[serde(default)]
    pub port: Option<u16>,
    /// JSONL file ingested at startup, relative to the configuration file.
    #[serde(default)]
    pub seed_data: Option<PathBuf>,
    #[serde(default = "default_token")]
    pub token: String,
    /// Port of the HTTP service when the site is served.
    #[serde(default)]
    pub http_port: Option<u16>,
    #[serde(default)]
    pub allocation_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkLatency {
    pub from: SiteId,
    pub to: SiteId,
    pub ms: u64,
}

/// One delay for every link, or per-link delays (unlisted links get none).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Latency {
    Uniform(u64),
    Links(Vec<LinkLatency>),
}

impl Default for Latency {
    fn default() -> Self {
        Latency::Uniform(0)
    }
}

impl Latency {
    fn one_way(&self, from: &SiteId, to: &SiteId) -> Duration {
        let ms = match self {
            Latency::Uniform(ms) => *ms,
            Latency::Links(links) => links
                .iter()
                .find(|l| &l.from == from && &l.to == to)
                .map_or(0, |l| l.ms),
        };
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum FaultEvent {
    /// The site stops answering; connections to it are refused.
    Down {
        site: SiteId,
    },
    Up {
        site: SiteId,
    },
    /// The next frame sent from `from` to `to` is lost.
    DropNext {
        from: SiteId,
        to: SiteId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledFault {
    /// Applied just before the script step with this number (counting from 1).
    pub at_step: usize,
    #[serde(flatten)]
    pub event: FaultEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub sites: Vec<SiteConfig>,
    #[serde(default)]
    pub latency_ms: Latency,
    #[serde(default)]
    pub faults: Vec<ScheduledFault>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Seeds query ids so runs are reproducible.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_capacity")]
    pub cache_capacity: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("site {site} cannot listen on port {port}: {source}")]
    Bind {
        site: SiteId,
        port: u16,
        #[source]
        source: std::io::Error,
    },
    #[error("seed data for {site} rejected line {line}: {reason}")]
    SeedData { site: SiteId, line: usize, reason: String },
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.into(),
            source,
        })?;
        let cfg = SimConfig::from_json(&text).map_err(|source| SimError::Json {
            path: path.into(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.sites.is_empty() {
            return Err(SimError::Config("no sites".into()));
        }
        let mut ids = BTreeSet::new();
        let mut ports = BTreeSet::new();
        for s in &self.sites {
            if s.site_id.is_empty() {
                return Err(SimError::Config("empty site id".into()));
            }
            if !ids.insert(&s.site_id) {
                return Err(SimError::Config(format!("site {} listed twice", s.site_id)));
            }
            for p in s.port.iter().chain(&s.http_port) {
                if !ports.insert(*p) {
                    return Err(SimError::Config(format!("port {p} used twice")));
                }
            }
        }
        let known = |s: &SiteId| ids.contains(s);
        for f in &self.faults {
            let ok = match &f.event {
                FaultEvent::Down { site } | FaultEvent::Up { site } => known(site),
                FaultEvent::DropNext { from, to } => known(from) && known(to),
            };
            if !ok {
                return Err(SimError::Config(format!(
                    "fault at step {} names an unknown site",
                    f.at_step
                )));
            }
        }
        if let Latency::Links(links) = &self.latency_ms {
            if let Some(l) = links.iter().find(|l| !known(&l.from) || !known(&l.to)) {
                return Err(SimError::Config(format!(
                    "latency for unknown link {} -> {}",
                    l.from, l.to
                )));
            }
        }
        Ok(())
    }

    pub fn site(&self, id: &SiteId) -> Option<&SiteConfig> {
        self.sites.iter().find(|s| &s.site_id == id)
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

/// One frame seen on the simulated network.
#[derive(Debug, Clone, Serialize)]
pub struct FrameRecord {
    /// Logical time: position in the transcript.
    pub time: u64,
    pub step: usize,
    pub from_site: SiteId,
    pub to_site: SiteId,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    pub summary: String,
    /// Frame size including the length prefix.
    pub bytes: usize,
    pub dropped: bool,
    #[serde(skip)]
    pub message: Option<WireMessage>,
}

fn kind_rank(kind: &str) -> u8 {
    match kind {
        "VERSION_PROBE" => 0,
        "VERSION" => 1,
        "QUERY" => 2,
        "RESULT" => 3,
        "ERROR" => 4,
        _ => 5,
    }
}

fn summarize(msg: &WireMessage) -> String {
    match msg {
        WireMessage::Query {
            hop_budget,
            formal_query,
            ..
        } => match query::decode(formal_query) {
            Ok(q) => format!("hop={hop_budget} target={}", q.target.name()),
            Err(_) => format!("hop={hop_budget} undecodable"),
        },
        WireMessage::Result { xml, data_version, .. } => match parse_resultset(xml) {
            Ok(p) => format!(
                "rows={} version={data_version} skipped={}",
                p.rows.len(),
                p.header.skipped
            ),
            Err(_) => format!("unparsable version={data_version}"),
        },
        WireMessage::VersionProbe => String::new(),
        WireMessage::Version { data_version, .. } => format!("version={data_version}"),
        WireMessage::Error { code, message, .. } => format!("{code}: {message}"),
    }
}

#[derive(Debug, Default)]
struct Transcript {
    sealed: Vec<FrameRecord>,
    pending: Vec<FrameRecord>,
}

#[derive(Debug, Default)]
struct Faults {
    down: BTreeSet<SiteId>,
    drop_next: BTreeSet<(SiteId, SiteId)>,
}

/// Transport decorator that applies faults and latency and records frames.
pub struct SimTransport {
    inner: RoutingTransport,
    latency: Latency,
    faults: Mutex<Faults>,
    transcript: Mutex<Transcript>,
    step: AtomicUsize,
    recording: AtomicBool,
}

impl SimTransport {
    pub fn new(latency: Latency) -> Self {
        SimTransport {
            inner: RoutingTransport::default(),
            latency,
            faults: Mutex::default(),
            transcript: Mutex::default(),
            step: AtomicUsize::new(0),
            recording: AtomicBool::new(true),
        }
    }

    pub fn in_process(&self) -> &InProcessTransport {
        &self.inner.local
    }

    pub fn set_recording(&self, on: bool) {
        self.recording.store(on, Ordering::SeqCst);
    }

    pub fn apply(&self, event: &FaultEvent) {
        let mut f = self.faults.lock().unwrap_or_else(|p| p.into_inner());
        match event {
            FaultEvent::Down { site } => {
                f.down.insert(site.clone());
            }
            FaultEvent::Up { site } => {
                f.down.remove(site);
            }
            FaultEvent::DropNext { from, to } => {
                f.drop_next.insert((from.clone(), to.clone()));
            }
        }
    }

    pub fn is_down(&self, site: &SiteId) -> bool {
        self.faults
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .down
            .contains(site)
    }

    /// Starts a new script step; frames recorded from now on carry `step`.
    pub fn begin_step(&self, step: usize) {
        self.seal_step();
        self.step.store(step, Ordering::SeqCst);
    }

    /// Orders the frames of the current step and appends them to the
    /// transcript. Concurrent sends within a step arrive in arbitrary order,
    /// so they are sorted by kind, sender and receiver.
    pub fn seal_step(&self) {
        let mut t = self.transcript.lock().unwrap_or_else(|p| p.into_inner());
        let mut pending = std::mem::take(&mut t.pending);
        pending.sort_by(|a, b| {
            (kind_rank(&a.kind), &a.from_site, &a.to_site).cmp(&(kind_rank(&b.kind), &b.from_site, &b.to_site))
        });
        let start = t.sealed.len() as u64;
        for (i, mut r) in pending.into_iter().enumerate() {
            r.time = start + i as u64;
            t.sealed.push(r);
        }
    }

    /// Every sealed frame so far.
    pub fn transcript(&self) -> Vec<FrameRecord> {
        self.seal_step();
        self.transcript.lock().unwrap_or_else(|p| p.into_inner()).sealed.clone()
    }

    fn record(&self, from: &SiteId, to: &SiteId, body: &[u8], dropped: bool) {
        if !self.recording.load(Ordering::SeqCst) {
            return;
        }
        let message = Envelope::decode(body).ok().map(|e| e.message);
        let (kind, query_id, summary) = match &message {
            Some(m) => (m.kind().to_string(), m.query_id().map(|q| q.to_string()), summarize(m)),
            None => ("UNDECODABLE".to_string(), None, String::new()),
        };
        let rec = FrameRecord {
            time: 0,
            step: self.step.load(Ordering::SeqCst),
            from_site: from.clone(),
            to_site: to.clone(),
            kind,
            query_id,
            summary,
            bytes: body.len() + 4,
            dropped,
            message,
        };
        self.transcript
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .pending
            .push(rec);
    }
}

impl Transport for SimTransport {
    fn exchange(
        &self,
        from: &SiteId,
        to: &PeerInfo,
        request: &[u8],
        timeout: Duration,
    ) -> Result<Vec<u8>, TransportError> {
        let dropped = {
            let mut f = self.faults.lock().unwrap_or_else(|p| p.into_inner());
            if f.down.contains(&to.site_id) || f.down.contains(from) {
                return Err(TransportError::Refused);
            }
            f.drop_next.remove(&(from.clone(), to.site_id.clone()))
        };
        if dropped {
            self.record(from, &to.site_id, request, true);
            return Err(TransportError::Timeout);
        }
        let there = self.latency.one_way(from, &to.site_id);
        let back = self.latency.one_way(&to.site_id, from);
        if there + back > timeout {
            self.record(from, &to.site_id, request, false);
            std::thread::sleep(timeout);
            return Err(TransportError::Timeout);
        }
        std::thread::sleep(there);
        self.record(from, &to.site_id, request, false);
        let reply = self.inner.exchange(from, to, request, timeout - there)?;
        std::thread::sleep(back);
        self.record(&to.site_id, from, &reply, false);
        Ok(reply)
    }
}

/// A running simulated federation.
pub struct SimNetwork {
    pub config: SimConfig,
    pub transport: Arc<SimTransport>,
    nodes: BTreeMap<SiteId, Arc<Node>>,
    servers: Vec<NodeServer>,
}

impl std::fmt::Debug for SimNetwork {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimNetwork")
            .field("sites", &self.nodes.keys())
            .finish_non_exhaustive()
    }
}

fn site_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

/// Creates site `index` of `config` with its seed data loaded.
fn start_node(
    config: &SimConfig,
    index: usize,
    addresses: &BTreeMap<SiteId, String>,
    transport: Arc<dyn Transport>,
    base_dir: &Path,
) -> Result<Arc<Node>, SimError> {
    let s = &config.sites[index];
    let peers = config
        .sites
        .iter()
        .filter(|p| p.site_id != s.site_id)
        .map(|p| PeerInfo::new(p.site_id.clone(), addresses[&p.site_id].clone()))
        .collect();
    let mut nc = NodeConfig::new(s.site_id.clone());
    nc.token = s.token.clone();
    nc.timeout = config.timeout();
    nc.cache_capacity = config.cache_capacity;
    nc.id_seed = Some(site_seed(config.seed, index));
    if let Some(a) = s.allocation_seed {
        nc.allocation_seed = a;
    }
    let node = Node::new(nc, peers, transport).map_err(|e| SimError::Config(e.to_string()))?;
    if let Some(path) = &s.seed_data {
        let path = base_dir.join(path);
        let text = fs::read_to_string(&path).map_err(|source| SimError::Io { path, source })?;
        let report = node.ingest_jsonl(&text).map_err(|e| SimError::Config(e.to_string()))?;
        if let Some((line, reason)) = report.rejected.first() {
            return Err(SimError::SeedData {
                site: s.site_id.clone(),
                line: *line,
                reason: reason.clone(),
            });
        }
    }
    Ok(Arc::new(node))
}

/// A single site running on its own, reaching peers over TCP.
#[derive(Debug)]
pub struct StandaloneSite {
    pub node: Arc<Node>,
    pub server: NodeServer,
}

/// Starts only `site` of `config`. Every site needs a `port`, since peers
/// live in other processes.
pub fn build_standalone(config: &SimConfig, site: &SiteId, base_dir: &Path) -> Result<StandaloneSite, SimError> {
    config.validate()?;
    let index = config
        .sites
        .iter()
        .position(|s| &s.site_id == site)
        .ok_or_else(|| SimError::Config(format!("site {site} is not configured")))?;
    let mut addresses = BTreeMap::new();
    for s in &config.sites {
        let port = s
            .port
            .ok_or_else(|| SimError::Config(format!("site {} needs a port to run standalone", s.site_id)))?;
        addresses.insert(s.site_id.clone(), format!("127.0.0.1:{port}"));
    }
    let node = start_node(config, index, &addresses, Arc::new(TcpTransport), base_dir)?;
    let port = config.sites[index].port.expect("checked above");
    let server = NodeServer::bind(Arc::clone(&node), &addresses[site]).map_err(|source| SimError::Bind {
        site: site.clone(),
        port,
        source,
    })?;
    Ok(StandaloneSite { node, server })
}

/// Starts every configured site and connects them in a full mesh. Seed data
/// paths are resolved against `base_dir`.
pub fn build_network(config: SimConfig, base_dir: &Path) -> Result<SimNetwork, SimError> {
    config.validate()?;
    let transport = Arc::new(SimTransport::new(config.latency_ms.clone()));
    let mut listeners = Vec::new();
    let mut addresses = BTreeMap::new();
    for s in &config.sites {
        let addr = match s.port {
            Some(port) => {
                let l = std::net::TcpListener::bind(("127.0.0.1", port)).map_err(|source| SimError::Bind {
                    site: s.site_id.clone(),
                    port,
                    source,
                })?;
                listeners.push((s.site_id.clone(), port, l));
                format!("127.0.0.1:{port}")
            }
            None => InProcessTransport::address(&s.site_id),
        };
        addresses.insert(s.site_id.clone(), addr);
    }
    // The probe binds only reserve the ports; release them for the servers.
    drop(listeners);

    let mut nodes = BTreeMap::new();
    for (i, s) in config.sites.iter().enumerate() {
        let shared: Arc<dyn Transport> = transport.clone();
        let node = start_node(&config, i, &addresses, shared, base_dir)?;
        transport.in_process().register(&node);
        nodes.insert(s.site_id.clone(), node);
    }

    let mut servers = Vec::new();
    for s in &config.sites {
        if let Some(port) = s.port {
            let node = Arc::clone(&nodes[&s.site_id]);
            let server = NodeServer::bind(node, &format!("127.0.0.1:{port}")).map_err(|source| SimError::Bind {
                site: s.site_id.clone(),
                port,
                source,
            })?;
            servers.push(server);
        }
    }
    Ok(SimNetwork {
        config,
        transport,
        nodes,
        servers,
    })
}

impl SimNetwork {
    pub fn node(&self, site: &SiteId) -> Option<&Arc<Node>> {
        self.nodes.get(site)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Arc<Node>> {
        self.nodes.values()
    }

    pub fn site_ids(&self) -> Vec<SiteId> {
        self.nodes.keys().cloned().collect()
    }

    /// Stops the TCP listeners.
    pub fn shutdown(&mut self) {
        for s in &mut self.servers {
            s.shutdown();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ScriptStep {
    Ingest {
        site: SiteId,
        #[serde(default)]
        file: Option<PathBuf>,
        #[serde(default)]
        records: Option<Vec<Record>>,
    },
    Query {
        site: SiteId,
        #[serde(default)]
        dsl: Option<String>,
        /// Wire text of a formal query.
        #[serde(default)]
        formal_query: Option<String>,
        /// Keep the query at `site`.
        #[serde(default)]
        local: bool,
    },
    Fault {
        #[serde(flatten)]
        event: FaultEvent,
    },
    Assert {
        /// The query step the assertion refers to.
        step: usize,
        #[serde(default)]
        rows: Option<usize>,
        /// Entries are `site` or `site:reason`.
        #[serde(default)]
        missing: Option<Vec<String>>,
        #[serde(default)]
        cache: Option<CacheStatus>,
        /// Expected frame counts by kind during that step.
        #[serde(default)]
        frames: Option<BTreeMap<String, usize>>,
    },
}

/// Parses a script: either an array of steps or `{"steps": [...]}`.
pub fn parse_script(text: &str) -> Result<Vec<ScriptStep>, serde_json::Error> {
    let mut v: serde_json::Value = serde_json::from_str(text)?;
    if let Some(steps) = v.get_mut("steps") {
        v = steps.take();
    }
    serde_json::from_value(v)
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepResult {
    Ingested(IngestReport),
    Answered(Box<QueryOutcome>),
    Failed(String),
    FaultApplied,
    Checked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Counting from 1.
    pub step: usize,
    pub site: Option<SiteId>,
    pub result: StepResult,
}

impl StepOutcome {
    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::json;
        let mut v = match &self.result {
            StepResult::Ingested(r) => json!({"op": "ingest", "report": r}),
            StepResult::Answered(o) => json!({
                "op": "query",
                "query_id": o.merged.query_id.to_string(),
                "rows": o.merged.rows.len(),
                "skipped": o.merged.skipped(),
                "missing": o.merged.missing.iter().map(|(s, r)| format!("{s}:{r}")).collect::<Vec<_>>(),
                "cache": o.cache,
            }),
            StepResult::Failed(e) => json!({"op": "query", "error": e}),
            StepResult::FaultApplied => json!({"op": "fault"}),
            StepResult::Checked => json!({"op": "assert", "ok": true}),
        };
        v["step"] = json!(self.step);
        if let Some(s) = &self.site {
            v["site"] = json!(s);
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub outcomes: Vec<StepOutcome>,
    pub transcript: Vec<FrameRecord>,
}

impl ScenarioReport {
    /// The transcript as JSON Lines.
    pub fn transcript_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.transcript {
            out.push_str(&serde_json::to_string(r).expect("frame records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn outcome(&self, step: usize) -> Option<&StepOutcome> {
        self.outcomes.iter().find(|o| o.step == step)
    }

    pub fn frames_in_step(&self, step: usize) -> impl Iterator<Item = &FrameRecord> {
        self.transcript.iter().filter(move |r| r.step == step)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("step {step}: unknown site {site}")]
    UnknownSite { step: usize, site: SiteId },
    #[error("step {step}: {msg}")]
    Invalid { step: usize, msg: String },
    #[error("step {step}: assertion failed: {msg}")]
    Assertion { step: usize, msg: String },
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl SimNetwork {
    /// Runs `steps` in order. Scheduled faults from the configuration fire
    /// before the step they name. Query failures are recorded, not fatal;
    /// a failed assertion stops the run.
    pub fn run_scenario(&self, steps: &[ScriptStep], base_dir: &Path) -> Result<ScenarioReport, ScenarioError> {
        let mut outcomes: Vec<StepOutcome> = Vec::new();
        for (i, s) in steps.iter().enumerate() {
            let step = i + 1;
            self.transport.begin_step(step);
            for f in self.config.faults.iter().filter(|f| f.at_step == step) {
                self.transport.apply(&f.event);
            }
            let outcome = self.run_step(step, s, base_dir, &outcomes)?;
            self.transport.seal_step();
            outcomes.push(outcome);
        }
        Ok(ScenarioReport {
            outcomes,
            transcript: self.transport.transcript(),
        })
    }

    fn node_at(&self, step: usize, site: &SiteId) -> Result<&Arc<Node>, ScenarioError> {
        self.nodes.get(site).ok_or_else(|| ScenarioError::UnknownSite {
            step,
            site: site.clone(),
        })
    }

    fn run_step(
        &self,
        step: usize,
        s: &ScriptStep,
        base_dir: &Path,
        done: &[StepOutcome],
    ) -> Result<StepOutcome, ScenarioError> {
        let invalid = |msg: String| ScenarioError::Invalid { step, msg };
        Ok(match s {
            ScriptStep::Ingest { site, file, records } => {
                let node = self.node_at(step, site)?;
                let report = match (file, records) {
                    (Some(f), None) => {
                        let path = base_dir.join(f);
                        let text = fs::read_to_string(&path).map_err(|source| SimError::Io { path, source })?;
                        node.ingest_jsonl(&text).map_err(|e| invalid(e.to_string()))?
                    }
                    (None, Some(r)) => node.ingest(r.iter().cloned()),
                    _ => return Err(invalid("ingest needs exactly one of `file` and `records`".into())),
                };
                StepOutcome {
                    step,
                    site: Some(site.clone()),
                    result: StepResult::Ingested(report),
                }
            }
            ScriptStep::Query {
                site,
                dsl,
                formal_query,
                local,
            } => {
                let node = self.node_at(step, site)?;
                let q: Result<FormalQuery, String> = match (dsl, formal_query) {
                    (Some(d), None) => node.translate(d).map_err(|e| e.to_string()),
                    (None, Some(f)) => query::decode(f).map_err(|e| e.to_string()),
                    _ => return Err(invalid("query needs exactly one of `dsl` and `formal_query`".into())),
                };
                let result = match q.map(|q| if *local { q.with_hop_budget(0) } else { q }) {
                    Err(e) => StepResult::Failed(e),
                    Ok(_) if self.transport.is_down(site) => StepResult::Failed(format!("site {site} is down")),
                    Ok(q) => match node.run_query(q) {
                        Ok(o) => StepResult::Answered(Box::new(o)),
                        Err(e) => StepResult::Failed(e.to_string()),
                    },
                };
                StepOutcome {
                    step,
                    site: Some(site.clone()),
                    result,
                }
            }
            ScriptStep::Fault { event } => {
                self.transport.apply(event);
                StepOutcome {
                    step,
                    site: None,
                    result: StepResult::FaultApplied,
                }
            }
            ScriptStep::Assert {
                step: target,
                rows,
                missing,
                cache,
                frames,
            } => {
                let fail = |msg: String| ScenarioError::Assertion { step, msg };
                let outcome = done
                    .iter()
                    .find(|o| o.step == *target)
                    .ok_or_else(|| invalid(format!("no earlier step {target}")))?;
                let answer = match &outcome.result {
                    StepResult::Answered(a) => Some(a),
                    StepResult::Failed(e) if rows.is_some() || missing.is_some() || cache.is_some() => {
                        return Err(fail(format!("step {target} failed: {e}")))
                    }
                    _ => None,
                };
                if let Some(a) = answer {
                    if let Some(want) = rows {
                        if a.merged.rows.len() != *want {
                            return Err(fail(format!("expected {want} rows, got {}", a.merged.rows.len())));
                        }
                    }
                    if let Some(want) = missing {
                        let got: Vec<String> = a.merged.missing.iter().map(|(s, r)| format!("{s}:{r}")).collect();
                        let matches = want.len() == got.len()
                            && want
                                .iter()
                                .all(|w| got.iter().any(|g| g == w || g.split(':').next() == Some(w.as_str())));
                        if !matches {
                            return Err(fail(format!("expected missing {want:?}, got {got:?}")));
                        }
                    }
                    if let Some(want) = cache {
                        if a.cache != *want {
                            return Err(fail(format!(
                                "expected cache {}, got {}",
                                want.as_str(),
                                a.cache.as_str()
                            )));
                        }
                    }
                } else if rows.is_some() || missing.is_some() || cache.is_some() {
                    return Err(invalid(format!("step {target} is not a query")));
                }
                if let Some(want) = frames {
                    let mut got: BTreeMap<String, usize> = BTreeMap::new();
                    for r in self.transport.transcript().iter().filter(|r| r.step == *target) {
                        *got.entry(r.kind.clone()).or_default() += 1;
                    }
                    for (kind, n) in want {
                        let have = got.get(kind).copied().unwrap_or(0);
                        if have != *n {
                            return Err(fail(format!("expected {n} {kind} frames in step {target}, got {have}")));
                        }
                    }
                }
                StepOutcome {
                    step,
                    site: None,
                    result: StepResult::Checked,
                }
            }
        })
    }
}

/// Loads a configuration and a script from disk and runs the scenario.
pub fn run_files(config: &Path, script: &Path) -> Result<ScenarioReport, ScenarioError> {
    let cfg = SimConfig::load(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(script).map_err(|source| SimError::Io {
        path: script.into(),
        source,
    })?;
    let steps = parse_script(&text).map_err(|source| SimError::Json {
        path: script.into(),
        source,
    })?;
    let mut net = build_network(cfg, base)?;
    let script_base = script.parent().unwrap_or(Path::new("."));
    let report = net.run_scenario(&steps, script_base);
    net.shutdown();
    report
}
