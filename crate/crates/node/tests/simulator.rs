mod common;

use std::fs;
use std::net::TcpListener;
use std::path::Path;

use mammofed_core::model::{Record, SiteId};
use mammofed_core::testing::{random_dataset, Dataset};
use mammofed_node::sim::{build_network, parse_script, run_files, ScenarioError, SimConfig, SimError, StepResult};
use mammofed_node::CacheStatus;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn jsonl(records: &[Record]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect()
}

/// Writes seed data for each site of `d` and returns the config text.
fn write_fixture(dir: &Path, d: &Dataset, extra: &str) -> String {
    let mut sites = Vec::new();
    for (site, records) in &d.sites {
        let file = format!("{site}.jsonl");
        fs::write(dir.join(&file), jsonl(records)).unwrap();
        sites.push(format!(
            r#"{{"site_id": "{site}", "seed_data": "{file}", "token": "k"}}"#
        ));
    }
    let cfg = format!(r#"{{"sites": [{}], "seed": 11{extra}}}"#, sites.join(", "));
    fs::write(dir.join("net.json"), &cfg).unwrap();
    cfg
}

fn dataset(seed: u64, k: usize) -> Dataset {
    random_dataset(&mut ChaCha8Rng::seed_from_u64(seed), k, 300)
}

const SCRIPT: &str = r#"{"steps": [
    {"op": "query", "site": "A", "dsl": "find images where age between 40 and 70"},
    {"op": "query", "site": "A", "dsl": "find images where age between 40 and 70"},
    {"op": "assert", "step": 2, "cache": "hit", "frames": {"QUERY": 0, "VERSION_PROBE": 2}},
    {"op": "ingest", "site": "C", "file": "more.jsonl"},
    {"op": "query", "site": "A", "dsl": "find images where age between 40 and 70"},
    {"op": "assert", "step": 5, "cache": "miss", "missing": [], "frames": {"QUERY": 2, "RESULT": 2}},
    {"op": "fault", "event": "down", "site": "B"},
    {"op": "query", "site": "A", "dsl": "find patients"},
    {"op": "assert", "step": 8, "missing": ["B:refused"], "frames": {"QUERY": 1}},
    {"op": "query", "site": "B", "dsl": "find patients"}
]}"#;

fn more_records() -> String {
    let d = dataset(99, 3);
    let renamed: Vec<Record> = d.sites[2]
        .1
        .iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).unwrap();
            for key in ["patient_id", "study_id", "image_id", "annotation_id"] {
                if let Some(s) = v.get(key).and_then(|s| s.as_str()).map(|s| format!("N{s}")) {
                    v[key] = s.into();
                }
            }
            serde_json::from_value(v).unwrap()
        })
        .collect();
    jsonl(&renamed)
}

#[test]
fn scripted_scenario_runs_and_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), &dataset(1, 3), "");
    fs::write(dir.path().join("script.json"), SCRIPT).unwrap();
    fs::write(dir.path().join("more.jsonl"), more_records()).unwrap();

    let run = || run_files(&dir.path().join("net.json"), &dir.path().join("script.json")).unwrap();
    let report = run();
    assert_eq!(report.outcomes.len(), 10);
    match &report.outcome(2).unwrap().result {
        StepResult::Answered(o) => assert_eq!(o.cache, CacheStatus::Hit),
        other => panic!("{other:?}"),
    }
    match &report.outcome(4).unwrap().result {
        StepResult::Ingested(r) => assert!(r.accepted > 0 && r.rejected.is_empty()),
        other => panic!("{other:?}"),
    }
    match &report.outcome(10).unwrap().result {
        StepResult::Failed(msg) => assert!(msg.contains("down"), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert!(report
        .frames_in_step(1)
        .all(|f| f.time < report.frames_in_step(2).next().unwrap().time));
    assert_eq!(
        report.frames_in_step(2).map(|f| f.kind.as_str()).collect::<Vec<_>>(),
        ["VERSION_PROBE", "VERSION_PROBE", "VERSION", "VERSION"]
    );

    let again = run();
    assert_eq!(report.transcript_jsonl(), again.transcript_jsonl());
    let lines: Vec<serde_json::Value> = report
        .transcript_jsonl()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), report.transcript.len());
    assert!(lines
        .iter()
        .all(|l| l["bytes"].as_u64().unwrap() > 4 && l.get("message").is_none()));
    assert_eq!(
        report.outcome(8).unwrap().to_json()["missing"],
        serde_json::json!(["B:refused"])
    );
}

#[test]
fn failed_assertions_stop_the_run() {
    let d = dataset(2, 2);
    let net = common::network(&d, 2);
    let steps = parse_script(
        r#"[{"op": "query", "site": "A", "dsl": "find patients"},
            {"op": "assert", "step": 1, "rows": 999999}]"#,
    )
    .unwrap();
    match net.run_scenario(&steps, Path::new(".")) {
        Err(ScenarioError::Assertion { step: 2, msg }) => assert!(msg.contains("999999"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let steps = parse_script(r#"[{"op": "query", "site": "Z", "dsl": "find patients"}]"#).unwrap();
    assert!(matches!(
        net.run_scenario(&steps, Path::new(".")),
        Err(ScenarioError::UnknownSite { step: 1, .. })
    ));
}

#[test]
fn scheduled_faults_fire_before_their_step() {
    let d = dataset(3, 3);
    let mut cfg = common::config(&mammofed_core::testing::site_names(3), 3);
    cfg.faults = serde_json::from_str(
        r#"[{"at_step": 2, "event": "down", "site": "C"},
            {"at_step": 3, "event": "up", "site": "C"}]"#,
    )
    .unwrap();
    let net = build_network(cfg, Path::new(".")).unwrap();
    for (site, records) in &d.sites {
        net.node(site).unwrap().ingest(records.iter().cloned());
    }
    let steps = parse_script(
        r#"[{"op": "query", "site": "A", "dsl": "find studies"},
            {"op": "query", "site": "A", "dsl": "find images"},
            {"op": "query", "site": "A", "dsl": "find patients"},
            {"op": "assert", "step": 1, "missing": []},
            {"op": "assert", "step": 2, "missing": ["C"]},
            {"op": "assert", "step": 3, "missing": []}]"#,
    )
    .unwrap();
    net.run_scenario(&steps, Path::new(".")).unwrap();
}

#[test]
fn configuration_is_validated() {
    let parse = |s: &str| {
        SimConfig::from_json(s).map_err(|e| e.to_string()).and_then(|c| {
            c.validate().map_err(|e| e.to_string())?;
            Ok(c)
        })
    };
    let ok = parse(r#"{"sites": [{"site_id": "A"}, {"site_id": "B"}], "latency_ms": 5}"#).unwrap();
    assert_eq!(ok.timeout_ms, 2000);
    assert_eq!(ok.sites[0].token, "mammofed");
    assert!(parse(r#"{"sites": [{"site_id": "A"}, {"site_id": "A"}]}"#).is_err());
    assert!(parse(r#"{"sites": [{"site_id": "A", "port": 7000}, {"site_id": "B", "http_port": 7000}]}"#).is_err());
    assert!(
        parse(r#"{"sites": [{"site_id": "A"}], "faults": [{"at_step": 1, "event": "down", "site": "Q"}]}"#).is_err()
    );
    assert!(parse(r#"{"sites": [{"site_id": "A"}], "latency_ms": [{"from": "A", "to": "Q", "ms": 1}]}"#).is_err());
    assert!(parse(r#"{"sites": [{"site_id": "A", "colour": "red"}]}"#).is_err());
    assert!(parse(r#"{"sites": []}"#).is_err());
}

#[test]
fn bad_seed_data_and_busy_ports_fail_startup() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.jsonl"), "{\"entity\": \"patient\"}\n").unwrap();
    let cfg = SimConfig::from_json(r#"{"sites": [{"site_id": "A", "seed_data": "bad.jsonl"}]}"#).unwrap();
    assert!(matches!(
        build_network(cfg, dir.path()),
        Err(SimError::SeedData { line: 1, .. })
    ));

    let busy = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = busy.local_addr().unwrap().port();
    let cfg = SimConfig::from_json(&format!(r#"{{"sites": [{{"site_id": "A", "port": {port}}}]}}"#)).unwrap();
    assert!(matches!(build_network(cfg, dir.path()), Err(SimError::Bind { .. })));
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn sites_with_ports_talk_over_tcp() {
    let d = dataset(4, 2);
    let (pa, pb) = (free_port(), free_port());
    let cfg = SimConfig::from_json(&format!(
        r#"{{"sites": [{{"site_id": "A", "port": {pa}}}, {{"site_id": "B", "port": {pb}}}]}}"#
    ))
    .unwrap();
    let mut net = build_network(cfg, Path::new(".")).unwrap();
    for (site, records) in &d.sites {
        net.node(site).unwrap().ingest(records.iter().cloned());
    }
    let a = net.node(&SiteId::new("A")).unwrap();
    assert_eq!(a.registry().peers[0].address, format!("127.0.0.1:{pb}"));
    net.transport.begin_step(1);
    let out = a.query_dsl("find patients").unwrap();
    assert!(out.merged.missing.is_empty());
    let total: usize = net.nodes().map(|n| n.store().patients().count()).sum();
    assert_eq!(out.merged.rows.len(), total);
    assert_eq!(net.transport.transcript().len(), 2);
    net.shutdown();
}
