//! Networked runtime for the federated mammogram-metadata engine.
//!
//! [`Node`] runs the query pipeline for one site. Nodes talk to each other
//! through a [`Transport`]: in-process for tests and the simulator, framed
//! TCP otherwise. [`api`] exposes a node over HTTP and [`sim`] wires up a
//! whole network from a configuration file and replays scripted scenarios.

pub mod api;
pub mod node;
pub mod server;
pub mod sim;
pub mod transport;

pub use api::{handle_http, HttpRequest, HttpResponse, HttpServer};
pub use mammofed_core as core;
pub use node::{CacheStatus, Node, NodeConfig, NodeError, QueryOutcome};
pub use server::NodeServer;
pub use sim::{build_network, SimConfig, SimNetwork, SimTransport};
pub use transport::{InProcessTransport, RoutingTransport, TcpTransport, Transport, TransportError};
