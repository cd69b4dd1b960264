//! Inter-site wire messages, framing, and the join of per-site results.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analyser::QueryId;
use crate::local::{ResultSet, Row};
use crate::model::SiteId;
use crate::xml::{write_resultset, ResultHeader};

/// Frames larger than this are refused as malformed.
pub const MAX_FRAME_LEN: u32 = 64 * 1024 * 1024;

/// Writes one frame: a big-endian `u32` byte length, then the body.
pub fn write_frame(w: &mut impl Write, body: &[u8]) -> io::Result<()> {
    let len = u32::try_from(body.len())
        .ok()
        .filter(|l| *l <= MAX_FRAME_LEN)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(body)?;
    w.flush()
}

pub fn read_frame(r: &mut impl Read) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame length {len} exceeds limit"),
        ));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok(body)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadMessage,
    HopViolation,
    Unauthorized,
    /// The query was well-formed but could not be compiled or executed here.
    QueryFailed,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorCode::BadMessage => "bad_message",
            ErrorCode::HopViolation => "hop_violation",
            ErrorCode::Unauthorized => "unauthorized",
            ErrorCode::QueryFailed => "query_failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireMessage {
    Query {
        query_id: QueryId,
        hop_budget: u8,
        formal_query: String,
    },
    Result {
        query_id: QueryId,
        xml: String,
        data_version: u64,
    },
    VersionProbe,
    Version {
        site_id: SiteId,
        data_version: u64,
    },
    Error {
        query_id: Option<QueryId>,
        code: ErrorCode,
        message: String,
    },
}

impl WireMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            WireMessage::Query { .. } => "QUERY",
            WireMessage::Result { .. } => "RESULT",
            WireMessage::VersionProbe => "VERSION_PROBE",
            WireMessage::Version { .. } => "VERSION",
            WireMessage::Error { .. } => "ERROR",
        }
    }

    pub fn query_id(&self) -> Option<QueryId> {
        match self {
            WireMessage::Query { query_id, .. } | WireMessage::Result { query_id, .. } => Some(*query_id),
            WireMessage::Error { query_id, .. } => *query_id,
            _ => None,
        }
    }

    pub fn error(query_id: Option<QueryId>, code: ErrorCode, message: impl Into<String>) -> Self {
        WireMessage::Error {
            query_id,
            code,
            message: message.into(),
        }
    }
}

/// A message together with the sender's shared token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub token: String,
    pub message: WireMessage,
}

#[derive(Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct Body {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    token: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query_id: Option<QueryId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hop_budget: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    formal_query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    xml: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data_version: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    site_id: Option<SiteId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    code: Option<ErrorCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad message: {0}")]
pub struct WireError(pub String);

fn need<T>(v: Option<T>, kind: &str, field: &str) -> Result<T, WireError> {
    v.ok_or_else(|| WireError(format!("{kind} lacks `{field}`")))
}

impl Envelope {
    pub fn new(token: impl Into<String>, message: WireMessage) -> Self {
        Envelope {
            token: token.into(),
            message,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Body {
            kind: self.message.kind().to_string(),
            token: self.token.clone(),
            ..Body::default()
        };
        match &self.message {
            WireMessage::Query {
                query_id,
                hop_budget,
                formal_query,
            } => {
                b.query_id = Some(*query_id);
                b.hop_budget = Some(*hop_budget);
                b.formal_query = Some(formal_query.clone());
            }
            WireMessage::Result {
                query_id,
                xml,
                data_version,
            } => {
                b.query_id = Some(*query_id);
                b.xml = Some(xml.clone());
                b.data_version = Some(*data_version);
            }
            WireMessage::VersionProbe => {}
            WireMessage::Version { site_id, data_version } => {
                b.site_id = Some(site_id.clone());
                b.data_version = Some(*data_version);
            }
            WireMessage::Error {
                query_id,
                code,
                message,
            } => {
                b.query_id = *query_id;
                b.code = Some(*code);
                b.message = Some(message.clone());
            }
        }
        serde_json::to_vec(&b).expect("envelopes always serialize")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let b: Body = serde_json::from_slice(bytes).map_err(|e| WireError(e.to_string()))?;
        let k = b.kind.as_str();
        let message = match k {
            "QUERY" => WireMessage::Query {
                query_id: need(b.query_id, k, "query_id")?,
                hop_budget: need(b.hop_budget, k, "hop_budget")?,
                formal_query: need(b.formal_query, k, "formal_query")?,
            },
            "RESULT" => WireMessage::Result {
                query_id: need(b.query_id, k, "query_id")?,
                xml: need(b.xml, k, "xml")?,
                data_version: need(b.data_version, k, "data_version")?,
            },
            "VERSION_PROBE" => WireMessage::VersionProbe,
            "VERSION" => WireMessage::Version {
                site_id: need(b.site_id, k, "site_id")?,
                data_version: need(b.data_version, k, "data_version")?,
            },
            "ERROR" => WireMessage::Error {
                query_id: b.query_id,
                code: need(b.code, k, "code")?,
                message: b.message.unwrap_or_default(),
            },
            other => return Err(WireError(format!("unknown message type `{other}`"))),
        };
        Ok(Envelope {
            token: b.token,
            message,
        })
    }
}

/// Why a site contributed nothing to a merged result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingReason {
    Timeout,
    Refused,
    Transport,
}

impl fmt::Display for MissingReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MissingReason::Timeout => "timeout",
            MissingReason::Refused => "refused",
            MissingReason::Transport => "transport",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergedResultSet {
    pub query_id: QueryId,
    /// Site that issued the query and assembled the answer.
    pub origin_site: SiteId,
    pub contributions: Vec<ResultSet>,
    /// Sorted by site id.
    pub missing: Vec<(SiteId, MissingReason)>,
    /// Deduplicated on `(site, entity, id)` and sorted by that key.
    pub rows: Vec<Row>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum JoinError {
    #[error("result from {site} answers {found}, expected {expected}")]
    QueryMismatch {
        site: SiteId,
        expected: QueryId,
        found: QueryId,
    },
    #[error("site {0} is both contributing and missing")]
    ContributingAndMissing(SiteId),
    #[error("conflicting copies of {site}/{entity}/{id}")]
    Integrity { site: SiteId, entity: String, id: String },
}

fn row_key(r: &Row) -> (String, &'static str, String) {
    (r.site_id.0.clone(), r.entity.name(), r.id.clone())
}

/// Joins the local result with remote results and missing-site markers.
pub fn join_results(
    local: ResultSet,
    remotes: Vec<ResultSet>,
    missing: Vec<(SiteId, MissingReason)>,
) -> Result<MergedResultSet, JoinError> {
    let query_id = local.query_id;
    let origin = local.site_id.clone();
    let mut contributions = vec![local];
    contributions.extend(remotes);
    join_contributions(query_id, origin, contributions, missing)
}

/// General form of [`join_results`] that does not require the origin to have
/// contributed.
pub fn join_contributions(
    query_id: QueryId,
    origin_site: SiteId,
    contributions: Vec<ResultSet>,
    mut missing: Vec<(SiteId, MissingReason)>,
) -> Result<MergedResultSet, JoinError> {
    let mut merged: BTreeMap<(String, &'static str, String), Row> = BTreeMap::new();
    let contributing: BTreeSet<&SiteId> = contributions.iter().map(|c| &c.site_id).collect();
    for c in &contributions {
        if c.query_id != query_id {
            return Err(JoinError::QueryMismatch {
                site: c.site_id.clone(),
                expected: query_id,
                found: c.query_id,
            });
        }
        for row in &c.rows {
            match merged.get(&row_key(row)) {
                Some(existing) if existing != row => {
                    return Err(JoinError::Integrity {
                        site: row.site_id.clone(),
                        entity: row.entity.name().to_string(),
                        id: row.id.clone(),
                    })
                }
                Some(_) => {}
                None => {
                    merged.insert(row_key(row), row.clone());
                }
            }
        }
    }
    if let Some((site, _)) = missing.iter().find(|(s, _)| contributing.contains(s)) {
        return Err(JoinError::ContributingAndMissing(site.clone()));
    }
    missing.sort();
    missing.dedup_by(|a, b| a.0 == b.0);
    Ok(MergedResultSet {
        query_id,
        origin_site,
        contributions,
        missing,
        rows: merged.into_values().collect(),
    })
}

impl MergedResultSet {
    pub fn is_partial(&self) -> bool {
        !self.missing.is_empty()
    }

    /// Data version each contributing site answered at.
    pub fn version_snapshot(&self) -> BTreeMap<SiteId, u64> {
        self.contributions
            .iter()
            .map(|c| (c.site_id.clone(), c.source_version))
            .collect()
    }

    pub fn skipped(&self) -> u64 {
        self.contributions.iter().map(|c| c.skipped).sum()
    }

    /// Version of the origin's contribution, 0 if it did not contribute.
    pub fn origin_version(&self) -> u64 {
        self.contributions
            .iter()
            .find(|c| c.site_id == self.origin_site)
            .map_or(0, |c| c.source_version)
    }

    /// The merged rows as one `<resultset>` headed by the origin site. Missing
    /// sites are not part of the XML; callers report them out of band.
    pub fn to_xml(&self) -> String {
        let header = ResultHeader {
            query_id: self.query_id,
            site_id: self.origin_site.clone(),
            version: self.origin_version(),
            skipped: self.skipped(),
        };
        write_resultset(&header, &self.rows)
    }

    /// JSON rendering: `{"query", "skipped", "missing", "records"}`.
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "query": self.query_id.to_string(),
            "skipped": self.skipped(),
            "missing": self.missing.iter().map(|(s, r)| json!({"site": s, "reason": r})).collect::<Vec<_>>(),
            "records": rows_json(&self.rows),
        })
    }
}

/// Rows as `[{"entity","id","site","fields":{path: value}}]`.
pub fn rows_json(rows: &[Row]) -> serde_json::Value {
    rows.iter()
        .map(|r| {
            let fields: serde_json::Map<String, serde_json::Value> = r
                .fields
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect();
            json!({"entity": r.entity.name(), "id": r.id, "site": r.site_id, "fields": fields})
        })
        .collect()
}
