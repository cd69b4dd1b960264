//! The `mammofed` command: runs sites, and queries them over their HTTP
//! service.
//!
//! Results go to stdout; diagnostics go to stderr. Exit status is 0 on
//! success, 1 for usage errors and rejected requests, and 2 when a site
//! cannot be reached or fails on its side.

pub mod client;
pub mod suites;

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use mammofed_core::model::SiteId;
use mammofed_node::sim::{self, build_standalone, ScenarioError, SimError};
use mammofed_node::{build_network, HttpServer, SimConfig};
use serde_json::json;

use crate::client::Client;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(#[from] SimError),
    #[error("{0}")]
    Scenario(#[from] ScenarioError),
    #[error("request failed ({status}): {message}")]
    Api { status: u16, message: String },
    #[error("cannot reach {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("cannot write output: {0}")]
    Output(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Api { status, .. } if *status < 500 => 1,
            CliError::Usage(_) | CliError::Config(_) | CliError::Scenario(_) | CliError::Io { .. } => 1,
            CliError::Api { .. } | CliError::Transport(_) | CliError::Protocol(_) | CliError::Output(_) => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Xml,
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Contralateral,
    QcAllocate,
    QcMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CacheAction {
    Stats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimAction {
    Run,
}

#[derive(Debug, Parser)]
#[command(name = "mammofed", version, about = "Federated mammogram-metadata queries")]
pub struct Cli {
    /// Network configuration. Client commands reach a site on its `http_port`.
    #[arg(long, global = true, env = "MAMMOFED_CONFIG")]
    pub config: Option<PathBuf>,
    /// Service address of the target site, overriding the configuration.
    #[arg(long, global = true)]
    pub addr: Option<String>,
    /// Bearer token. Defaults to the site's token in the configuration.
    #[arg(long, global = true, env = "MAMMOFED_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured network, or one site of it, until interrupted.
    Serve {
        /// Run only this site; peers are reached on their ports.
        #[arg(long)]
        site: Option<String>,
    },
    /// Load JSONL records into a site.
    Ingest {
        #[arg(long)]
        site: String,
        #[arg(long)]
        file: PathBuf,
    },
    /// Run a DSL query from a site.
    Query {
        #[arg(long)]
        site: String,
        /// Answer from the site's own data only.
        #[arg(long)]
        local: bool,
        #[arg(long, value_enum, default_value_t = Format::Xml)]
        format: Format,
        dsl: String,
    },
    /// Find patients similar to a reference patient.
    Similar {
        #[arg(long)]
        site: String,
        #[arg(long)]
        patient: String,
        #[arg(long, default_value_t = 3)]
        age_band: u32,
        /// Require the same children-count band.
        #[arg(long)]
        children_band: bool,
        /// Match both pregnancy ages within this many years.
        #[arg(long)]
        pregnancy_band: Option<u32>,
        /// Reference image for feature similarity.
        #[arg(long, requires = "threshold")]
        like: Option<String>,
        #[arg(long, requires = "like")]
        threshold: Option<f64>,
        /// Views compared for `--like`, e.g. `MLO,CC`.
        #[arg(long, value_delimiter = ',', requires = "like")]
        views: Vec<String>,
        #[arg(long, value_enum, default_value_t = Format::Xml)]
        format: Format,
    },
    /// Run a clinical suite through a site.
    Suite {
        #[arg(value_enum)]
        suite: Suite,
        #[arg(long)]
        site: String,
        /// Allocation seed for `qc-allocate`.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Allocate on the site's own desk instead of a fresh seeded state.
        #[arg(long, conflicts_with = "seed")]
        live: bool,
        /// With `qc-metrics --format csv`, emit per-reading rows.
        #[arg(long)]
        readings: bool,
        /// `json` report, `csv` table, or the `xml` result the suite read.
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Inspect a site's knowledge cache.
    Cache {
        #[arg(value_enum)]
        action: CacheAction,
        #[arg(long)]
        site: String,
    },
    /// Replay a scripted scenario on an in-process network.
    Sim {
        #[arg(value_enum)]
        action: SimAction,
        #[arg(long)]
        script: PathBuf,
        /// Write the wire transcript here as JSONL.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
}

impl Cli {
    fn load_config(&self) -> Result<Option<SimConfig>, CliError> {
        self.config
            .as_deref()
            .map(SimConfig::load)
            .transpose()
            .map_err(CliError::from)
    }

    fn require_config(&self) -> Result<(&Path, SimConfig), CliError> {
        let path = self
            .config
            .as_deref()
            .ok_or_else(|| CliError::Usage("--config is required".into()))?;
        Ok((path, SimConfig::load(path)?))
    }

    /// Client for `site`, addressed by `--addr` or the configuration.
    pub fn client(&self, site: &str) -> Result<Client, CliError> {
        let cfg = self.load_config()?;
        let entry = cfg.as_ref().and_then(|c| c.site(&SiteId::new(site)));
        if cfg.is_some() && entry.is_none() && self.addr.is_none() {
            return Err(CliError::Usage(format!("site {site} is not in the configuration")));
        }
        let addr = match (&self.addr, entry) {
            (Some(a), _) => a.clone(),
            (None, Some(s)) => match s.http_port {
                Some(p) => format!("127.0.0.1:{p}"),
                None => return Err(CliError::Usage(format!("site {site} has no http_port"))),
            },
            (None, None) => return Err(CliError::Usage("give --addr or --config".into())),
        };
        let token = self
            .token
            .clone()
            .or_else(|| entry.map(|s| s.token.clone()))
            .ok_or_else(|| CliError::Usage("no token: set MAMMOFED_TOKEN or --token".into()))?;
        Ok(Client::new(&addr, &token))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|source| CliError::Io {
        path: path.into(),
        source,
    })
}

fn warn_missing(reply: &client::Reply, err: &mut dyn Write) {
    if let Some(m) = reply.header("X-Mammofed-Missing") {
        let _ = writeln!(err, "warning: partial result, missing sites: {m}");
    }
}

fn result_path(base: &str, format: Format) -> Result<String, CliError> {
    match format {
        Format::Xml => Ok(base.to_string()),
        Format::Json => Ok(format!("{base}?format=json")),
        Format::Csv => Err(CliError::Usage("results render as xml or json".into())),
    }
}

/// Runs a parsed command. `serve` only returns on a startup error.
pub fn run(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Serve { site } => serve(cli, site.as_deref(), out, err),
        Command::Ingest { site, file } => {
            let body = read_file(file)?;
            let reply = cli
                .client(site)?
                .post("/ingest", "application/x-ndjson", &body)?
                .success()?;
            let report = reply.json()?;
            if let Some(rejected) = report["rejected"].as_array().filter(|r| !r.is_empty()) {
                let _ = writeln!(err, "warning: {} line(s) rejected", rejected.len());
            }
            writeln!(out, "{report}")?;
            Ok(())
        }
        Command::Query {
            site,
            local,
            format,
            dsl,
        } => {
            let path = result_path("/query", *format)?;
            let body = json!({ "dsl": dsl, "local": local }).to_string();
            let reply = cli
                .client(site)?
                .post(&path, "application/json", body.as_bytes())?
                .success()?;
            warn_missing(&reply, err);
            out.write_all(&reply.body)?;
            Ok(())
        }
        Command::Similar {
            site,
            patient,
            age_band,
            children_band,
            pregnancy_band,
            like,
            threshold,
            views,
            format,
        } => {
            let path = result_path("/similar", *format)?;
            let mut criteria = json!({
                "age_band": age_band,
                "match_children_band": children_band,
                "match_pregnancy_ages_band": pregnancy_band,
            });
            if let (Some(image), Some(t)) = (like, threshold) {
                let mut m = json!({ "reference_image": image, "threshold": t });
                if !views.is_empty() {
                    m["views"] = json!(views);
                }
                criteria["image_match"] = m;
            }
            let body = json!({ "patient_id": patient, "criteria": criteria }).to_string();
            let reply = cli
                .client(site)?
                .post(&path, "application/json", body.as_bytes())?
                .success()?;
            warn_missing(&reply, err);
            out.write_all(&reply.body)?;
            Ok(())
        }
        Command::Suite {
            suite,
            site,
            seed,
            live,
            readings,
            format,
        } => {
            let client = cli.client(site)?;
            let id = SiteId::new(site.as_str());
            let text = match suite {
                Suite::Contralateral => suites::contralateral(&client, &id, *format)?,
                Suite::QcAllocate => suites::qc_allocate(&client, &id, *seed, *live, *format)?,
                Suite::QcMetrics => suites::qc_metrics(&client, &id, *readings, *format)?,
            };
            out.write_all(text.as_bytes())?;
            if *format == Format::Json {
                writeln!(out)?;
            }
            Ok(())
        }
        Command::Cache {
            action: CacheAction::Stats,
            site,
        } => {
            let reply = cli.client(site)?.get("/cache/stats")?.success()?;
            writeln!(out, "{}", reply.json()?)?;
            Ok(())
        }
        Command::Sim {
            action: SimAction::Run,
            script,
            transcript,
        } => {
            let (config, _) = cli.require_config()?;
            let report = sim::run_files(config, script)?;
            for o in &report.outcomes {
                writeln!(out, "{}", o.to_json())?;
            }
            if let Some(path) = transcript {
                std::fs::write(path, report.transcript_jsonl()).map_err(|source| CliError::Io {
                    path: path.clone(),
                    source,
                })?;
            }
            Ok(())
        }
    }
}

fn serve(cli: &Cli, site: Option<&str>, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let (path, config) = cli.require_config()?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut http = Vec::new();
    let mut announce = |site: &SiteId, inter_site: Option<String>, node: &Arc<mammofed_node::Node>| {
        let http_port = config.site(site).and_then(|s| s.http_port);
        let addr = match http_port {
            Some(p) => {
                let server = HttpServer::bind(Arc::clone(node), &format!("127.0.0.1:{p}")).map_err(|source| {
                    CliError::Config(SimError::Bind {
                        site: site.clone(),
                        port: p,
                        source,
                    })
                })?;
                let a = server.local_addr().to_string();
                http.push(server);
                Some(a)
            }
            None => None,
        };
        writeln!(
            out,
            "{}",
            json!({ "site": site, "http": addr, "inter_site": inter_site })
        )?;
        Ok::<(), CliError>(())
    };
    // Both handles must outlive the loop below.
    let _standalone;
    let _network;
    match site {
        Some(s) => {
            let one = build_standalone(&config, &SiteId::new(s), base)?;
            announce(one.node.site_id(), Some(one.server.local_addr().to_string()), &one.node)?;
            _standalone = one;
        }
        None => {
            let net = build_network(config.clone(), base)?;
            // A long-running network would otherwise keep every frame.
            net.transport.set_recording(false);
            for id in net.site_ids() {
                let inter_site = config.site(&id).and_then(|s| s.port).map(|p| format!("127.0.0.1:{p}"));
                announce(&id, inter_site, net.node(&id).expect("site exists"))?;
            }
            _network = net;
        }
    }
    out.flush()?;
    if http.is_empty() {
        let _ = writeln!(err, "warning: no site has an http_port; clients cannot connect");
    }
    loop {
        std::thread::park();
    }
}
