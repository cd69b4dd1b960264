//! Request/response exchange of frame bodies between sites.
//!
//! A transport moves one encoded [`Envelope`](mammofed_core::federation::Envelope)
//! to a peer and returns the peer's single reply. Peers whose address starts
//! with `inproc:` live in the same process; any other address is a TCP
//! `host:port`.

use std::collections::BTreeMap;
use std::io;
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::{RwLock, Weak};
use std::time::{Duration, Instant};

use mammofed_core::analyser::PeerInfo;
use mammofed_core::federation::{read_frame, write_frame, MissingReason};
use mammofed_core::model::SiteId;

use crate::node::Node;

pub const INPROC_PREFIX: &str = "inproc:";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("timed out")]
    Timeout,
    #[error("connection refused")]
    Refused,
    #[error("transport failure: {0}")]
    Failed(String),
}

impl TransportError {
    pub fn reason(&self) -> MissingReason {
        match self {
            TransportError::Timeout => MissingReason::Timeout,
            TransportError::Refused => MissingReason::Refused,
            TransportError::Failed(_) => MissingReason::Transport,
        }
    }
}

impl From<io::Error> for TransportError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::ConnectionRefused => TransportError::Refused,
            io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => TransportError::Timeout,
            _ => TransportError::Failed(e.to_string()),
        }
    }
}

pub trait Transport: Send + Sync {
    /// Sends `request` to `to` and waits at most `timeout` for the reply.
    fn exchange(
        &self,
        from: &SiteId,
        to: &PeerInfo,
        request: &[u8],
        timeout: Duration,
    ) -> Result<Vec<u8>, TransportError>;
}

/// One TCP connection per exchange.
#[derive(Debug, Default, Clone, Copy)]
pub struct TcpTransport;

impl Transport for TcpTransport {
    fn exchange(
        &self,
        _from: &SiteId,
        to: &PeerInfo,
        request: &[u8],
        timeout: Duration,
    ) -> Result<Vec<u8>, TransportError> {
        let start = Instant::now();
        let addr = to
            .address
            .to_socket_addrs()
            .map_err(|e| TransportError::Failed(format!("bad address {}: {e}", to.address)))?
            .next()
            .ok_or_else(|| TransportError::Failed(format!("address {} resolves to nothing", to.address)))?;
        let mut stream = TcpStream::connect_timeout(&addr, timeout)?;
        let left = timeout
            .checked_sub(start.elapsed())
            .filter(|d| !d.is_zero())
            .ok_or(TransportError::Timeout)?;
        stream.set_read_timeout(Some(left))?;
        stream.set_write_timeout(Some(left))?;
        stream.set_nodelay(true)?;
        write_frame(&mut stream, request)?;
        Ok(read_frame(&mut stream)?)
    }
}

/// Delivers frames straight to nodes in this process.
#[derive(Default)]
pub struct InProcessTransport {
    nodes: RwLock<BTreeMap<SiteId, Weak<Node>>>,
}

impl InProcessTransport {
    pub fn new() -> Self {
        InProcessTransport::default()
    }

    pub fn register(&self, node: &std::sync::Arc<Node>) {
        self.nodes
            .write()
            .expect("transport lock")
            .insert(node.site_id().clone(), std::sync::Arc::downgrade(node));
    }

    pub fn address(site: &SiteId) -> String {
        format!("{INPROC_PREFIX}{site}")
    }
}

impl Transport for InProcessTransport {
    fn exchange(
        &self,
        _from: &SiteId,
        to: &PeerInfo,
        request: &[u8],
        _timeout: Duration,
    ) -> Result<Vec<u8>, TransportError> {
        let site = to.address.strip_prefix(INPROC_PREFIX).unwrap_or(to.site_id.as_str());
        let node = self
            .nodes
            .read()
            .expect("transport lock")
            .get(&SiteId::new(site))
            .and_then(Weak::upgrade)
            .ok_or(TransportError::Refused)?;
        Ok(node.handle_frame(request))
    }
}

/// Sends `inproc:` addresses in-process and everything else over TCP.
#[derive(Default)]
pub struct RoutingTransport {
    pub local: InProcessTransport,
    pub tcp: TcpTransport,
}

impl Transport for RoutingTransport {
    fn exchange(
        &self,
        from: &SiteId,
        to: &PeerInfo,
        request: &[u8],
        timeout: Duration,
    ) -> Result<Vec<u8>, TransportError> {
        if to.address.starts_with(INPROC_PREFIX) {
            self.local.exchange(from, to, request, timeout)
        } else {
            self.tcp.exchange(from, to, request, timeout)
        }
    }
}
