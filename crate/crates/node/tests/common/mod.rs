//! Shared fixtures for the node integration tests.

#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use mammofed_core::model::SiteId;
use mammofed_core::testing::Dataset;
use mammofed_node::sim::{build_network, SimConfig, SimNetwork, SiteConfig};
use mammofed_node::Node;

pub const TOKEN: &str = "shared-secret";

pub fn site_config(site: &SiteId) -> SiteConfig {
    SiteConfig {
        site_id: site.clone(),
        port: None,
        seed_data: None,
        token: TOKEN.into(),
        http_port: None,
        allocation_seed: None,
    }
}

pub fn config(sites: &[SiteId], seed: u64) -> SimConfig {
    SimConfig::from_json(&format!("{{\"sites\": [], \"seed\": {seed}}}"))
        .map(|mut c| {
            c.sites = sites.iter().map(site_config).collect();
            c
        })
        .expect("minimal config parses")
}

/// In-process network holding `d`, one ingestion batch per site.
pub fn network(d: &Dataset, seed: u64) -> SimNetwork {
    let sites: Vec<SiteId> = d.sites.iter().map(|(s, _)| s.clone()).collect();
    let net = build_network(config(&sites, seed), Path::new(".")).expect("network starts");
    for (site, records) in &d.sites {
        let report = net.node(site).unwrap().ingest(records.iter().cloned());
        assert!(report.rejected.is_empty(), "{:?}", report.rejected);
    }
    net
}

pub fn node<'a>(net: &'a SimNetwork, site: &str) -> &'a Arc<Node> {
    net.node(&SiteId::new(site)).expect("site exists")
}
