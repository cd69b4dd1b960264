//! HTTP service in front of one node.
//!
//! [`handle_http`] maps a plain request value to a response so routes can be
//! tested without sockets; [`HttpServer`] runs it behind `tiny_http`.

use std::io::{self, Read};
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use mammofed_core::clinical::AllocationError;
use mammofed_core::query;
use mammofed_core::translator::SimilarityCriteria;
use percent_encoding::percent_decode_str;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::node::{Node, NodeError, QueryOutcome};

/// Largest request body accepted.
pub const MAX_BODY: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HttpRequest {
    pub method: String,
    /// Path without the query string, still percent-encoded.
    pub path: String,
    pub query: Vec<(String, String)>,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpRequest {
    /// Builds a request from a target such as `/studies?patient=P1`.
    pub fn new(method: &str, target: &str) -> Self {
        let (path, qs) = target.split_once('?').unwrap_or((target, ""));
        HttpRequest {
            method: method.to_ascii_uppercase(),
            path: path.to_string(),
            query: form_urlencoded::parse(qs.as_bytes()).into_owned().collect(),
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.to_string(), value.to_string()));
        self
    }

    pub fn bearer(self, token: &str) -> Self {
        self.header("Authorization", &format!("Bearer {token}"))
    }

    pub fn body(mut self, body: impl Into<Vec<u8>>) -> Self {
        self.body = body.into();
        self
    }

    pub fn get_header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn param(&self, name: &str) -> Option<&str> {
        self.query.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    fn wants_json(&self) -> bool {
        match self.param("format") {
            Some(f) => f.eq_ignore_ascii_case("json"),
            None => self
                .get_header("Accept")
                .is_some_and(|a| a.contains("application/json")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub content_type: &'static str,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn json(status: u16, v: &Value) -> Self {
        HttpResponse {
            status,
            content_type: "application/json",
            headers: Vec::new(),
            body: serde_json::to_vec(v).expect("JSON values serialize"),
        }
    }

    pub fn xml(status: u16, text: String) -> Self {
        HttpResponse {
            status,
            content_type: "application/xml",
            headers: Vec::new(),
            body: text.into_bytes(),
        }
    }

    pub fn error(status: u16, msg: impl std::fmt::Display) -> Self {
        HttpResponse::json(status, &json!({ "error": msg.to_string() }))
    }

    pub fn get_header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn text(&self) -> &str {
        std::str::from_utf8(&self.body).unwrap_or("")
    }

    pub fn json_body(&self) -> Option<Value> {
        serde_json::from_slice(&self.body).ok()
    }
}

fn status_for(e: &NodeError) -> u16 {
    match e {
        NodeError::Translate(_) | NodeError::Compile(_) => 400,
        NodeError::UnknownPatient(_) => 404,
        NodeError::AllFailed(_) => 502,
        NodeError::Join(_) => 500,
    }
}

fn authorized(node: &Node, req: &HttpRequest) -> bool {
    req.get_header("Authorization")
        .and_then(|h| h.strip_prefix("Bearer "))
        .is_some_and(|t| t.trim() == node.config().token)
}

/// Routes one request.
pub fn handle_http(node: &Node, req: &HttpRequest) -> HttpResponse {
    if !authorized(node, req) {
        return HttpResponse::error(401, "missing or wrong bearer token");
    }
    let segments: Vec<String> = req
        .path
        .trim_matches('/')
        .split('/')
        .filter(|s| !s.is_empty())
        .map(|s| percent_decode_str(s).decode_utf8_lossy().into_owned())
        .collect();
    let segs: Vec<&str> = segments.iter().map(String::as_str).collect();
    match (req.method.as_str(), segs.as_slice()) {
        ("POST", ["query"]) => post_query(node, req),
        ("POST", ["similar"]) => post_similar(node, req),
        ("POST", ["ingest"]) => post_ingest(node, req),
        ("POST", ["allocate"]) => post_allocate(node, req),
        ("GET", ["sites"]) => get_sites(node),
        ("GET", ["cache", "stats"]) => HttpResponse::json(200, &json!(node.cache_stats())),
        ("GET", ["patients", id]) => {
            let store = node.store();
            match store.patient(id) {
                Some(p) => HttpResponse::json(200, &json!(p)),
                None => HttpResponse::error(404, format!("unknown patient {id}")),
            }
        }
        ("GET", ["studies"]) => match req.param("patient") {
            Some(p) => {
                let store = node.store();
                HttpResponse::json(200, &json!(store.studies_of(p).collect::<Vec<_>>()))
            }
            None => HttpResponse::error(400, "`patient` parameter required"),
        },
        ("GET", ["images"]) => match req.param("study") {
            Some(s) => {
                let store = node.store();
                HttpResponse::json(200, &json!(store.images_of(s).collect::<Vec<_>>()))
            }
            None => HttpResponse::error(400, "`study` parameter required"),
        },
        ("GET", ["annotations"]) => match req.param("image") {
            Some(i) => {
                let store = node.store();
                HttpResponse::json(200, &json!(store.annotations_of(i).collect::<Vec<_>>()))
            }
            None => HttpResponse::error(400, "`image` parameter required"),
        },
        (_, ["query" | "similar" | "ingest" | "allocate" | "sites" | "studies" | "images" | "annotations"])
        | (_, ["cache", "stats"] | ["patients", _]) => HttpResponse::error(405, "method not allowed"),
        _ => HttpResponse::error(404, format!("no route for {}", req.path)),
    }
}

fn body_text(req: &HttpRequest) -> Result<&str, HttpResponse> {
    std::str::from_utf8(&req.body).map_err(|_| HttpResponse::error(400, "body is not UTF-8"))
}

fn parse_json<T: for<'de> Deserialize<'de>>(req: &HttpRequest) -> Result<T, HttpResponse> {
    serde_json::from_slice(&req.body).map_err(|e| HttpResponse::error(400, format!("invalid JSON body: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRequest {
    #[serde(default)]
    dsl: Option<String>,
    /// Wire text of a formal query.
    #[serde(default)]
    formal_query: Option<String>,
    #[serde(default)]
    local: bool,
}

fn render(req: &HttpRequest, result: Result<QueryOutcome, NodeError>) -> HttpResponse {
    let outcome = match result {
        Ok(o) => o,
        Err(e) => return HttpResponse::error(status_for(&e), e),
    };
    let mut resp = if req.wants_json() {
        HttpResponse::json(200, &outcome.to_json())
    } else {
        HttpResponse::xml(200, outcome.xml.clone())
    };
    resp.headers
        .push(("X-Mammofed-Cache".into(), outcome.cache.as_str().into()));
    resp.headers
        .push(("X-Mammofed-Query-Id".into(), outcome.merged.query_id.to_string()));
    if !outcome.merged.missing.is_empty() {
        resp.headers
            .push(("X-Mammofed-Missing".into(), outcome.missing_header()));
    }
    resp
}

fn post_query(node: &Node, req: &HttpRequest) -> HttpResponse {
    let text = match body_text(req) {
        Ok(t) => t,
        Err(r) => return r,
    };
    let is_json =
        req.get_header("Content-Type").is_some_and(|c| c.contains("json")) || text.trim_start().starts_with('{');
    let (q, local) = if is_json {
        let r: QueryRequest = match parse_json(req) {
            Ok(r) => r,
            Err(resp) => return resp,
        };
        let q = match (r.dsl, r.formal_query) {
            (Some(d), None) => node.translate(&d),
            (None, Some(f)) => match query::decode(&f) {
                Ok(q) => Ok(q),
                Err(e) => return HttpResponse::error(400, e),
            },
            _ => return HttpResponse::error(400, "give exactly one of `dsl` and `formal_query`"),
        };
        (q, r.local)
    } else {
        (node.translate(text.trim()), false)
    };
    let result = q.and_then(|q| node.run_query(if local { q.with_hop_budget(0) } else { q }));
    render(req, result)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimilarRequest {
    patient_id: String,
    #[serde(default)]
    criteria: SimilarityCriteria,
}

fn post_similar(node: &Node, req: &HttpRequest) -> HttpResponse {
    match parse_json::<SimilarRequest>(req) {
        Ok(r) => render(req, node.similar(&r.patient_id, &r.criteria)),
        Err(resp) => resp,
    }
}

fn post_ingest(node: &Node, req: &HttpRequest) -> HttpResponse {
    let text = match body_text(req) {
        Ok(t) => t,
        Err(r) => return r,
    };
    match node.ingest_jsonl(text) {
        Ok(report) => HttpResponse::json(200, &json!(report)),
        Err(e) => HttpResponse::error(400, e),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AllocateRequest {
    patient_id: String,
}

fn post_allocate(node: &Node, req: &HttpRequest) -> HttpResponse {
    let r: AllocateRequest = match parse_json(req) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    match node.allocate(&r.patient_id) {
        Ok(view) => HttpResponse::json(200, &json!(view)),
        Err(e @ AllocationError::Duplicate(_)) => HttpResponse::error(409, e),
    }
}

fn get_sites(node: &Node) -> HttpResponse {
    let reg = node.registry();
    HttpResponse::json(
        200,
        &json!({
            "local": { "site_id": reg.local_site, "data_version": node.data_version() },
            "peers": reg.peers,
        }),
    )
}

/// A running HTTP listener; dropping it stops the service.
pub struct HttpServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    worker: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for HttpServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpServer").field("addr", &self.addr).finish()
    }
}

impl HttpServer {
    /// Serves `node` on `addr`; port 0 picks a free port.
    pub fn bind(node: Arc<Node>, addr: &str) -> io::Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("HTTP listener has no IP address"))?;
        let server = Arc::new(server);
        let srv = Arc::clone(&server);
        let worker = std::thread::Builder::new()
            .name(format!("http-{}", node.site_id()))
            .spawn(move || {
                for request in srv.incoming_requests() {
                    let node = Arc::clone(&node);
                    std::thread::spawn(move || respond(&node, request));
                }
            })?;
        Ok(HttpServer {
            server,
            addr,
            worker: Some(worker),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn respond(node: &Node, mut request: tiny_http::Request) {
    let target = request.url().to_string();
    let mut req = HttpRequest::new(request.method().as_str(), &target);
    req.headers = request
        .headers()
        .iter()
        .map(|h| (h.field.as_str().as_str().to_string(), h.value.as_str().to_string()))
        .collect();
    let mut body = Vec::new();
    let read = request.as_reader().take(MAX_BODY as u64 + 1).read_to_end(&mut body);
    let resp = match read {
        Err(e) => HttpResponse::error(400, format!("cannot read body: {e}")),
        Ok(n) if n > MAX_BODY => HttpResponse::error(413, "body too large"),
        Ok(_) => {
            req.body = body;
            handle_http(node, &req)
        }
    };
    let mut out = tiny_http::Response::from_data(resp.body).with_status_code(resp.status);
    let headers = std::iter::once(("Content-Type".to_string(), resp.content_type.to_string())).chain(resp.headers);
    for (k, v) in headers {
        if let Ok(h) = tiny_http::Header::from_bytes(k.as_bytes(), v.as_bytes()) {
            out.add_header(h);
        }
    }
    let _ = request.respond(out);
}
