mod common;

use std::sync::Arc;

use mammofed_core::model::SiteId;
use mammofed_core::testing::random_dataset;
use mammofed_core::xml::parse_resultset;
use mammofed_node::sim::{FaultEvent, SimNetwork};
use mammofed_node::{handle_http, HttpRequest, HttpResponse, HttpServer, Node};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn net() -> SimNetwork {
    common::network(&random_dataset(&mut ChaCha8Rng::seed_from_u64(21), 3, 400), 21)
}

fn call(node: &Node, req: HttpRequest) -> HttpResponse {
    handle_http(node, &req.bearer(common::TOKEN))
}

fn json_of(resp: &HttpResponse) -> Value {
    resp.json_body().unwrap_or_else(|| panic!("not JSON: {}", resp.text()))
}

#[test]
fn every_route_needs_the_token() {
    let n = net();
    let a = common::node(&n, "A");
    for (m, path) in [
        ("GET", "/sites"),
        ("POST", "/query"),
        ("GET", "/cache/stats"),
        ("GET", "/nowhere"),
    ] {
        let resp = handle_http(a, &HttpRequest::new(m, path));
        assert_eq!(resp.status, 401, "{m} {path}");
        let wrong = handle_http(a, &HttpRequest::new(m, path).bearer("nope"));
        assert_eq!(wrong.status, 401);
        assert!(json_of(&wrong)["error"].is_string());
    }
}

#[test]
fn query_returns_xml_then_serves_from_cache() {
    let n = net();
    let a = common::node(&n, "A");
    let req = || HttpRequest::new("POST", "/query").body("find images where age between 45 and 60");
    let first = call(a, req());
    assert_eq!(first.status, 200, "{}", first.text());
    assert_eq!(first.content_type, "application/xml");
    assert_eq!(first.get_header("X-Mammofed-Cache"), Some("miss"));
    assert!(first.get_header("X-Mammofed-Missing").is_none());
    let qid = first.get_header("X-Mammofed-Query-Id").unwrap().to_string();
    let parsed = parse_resultset(first.text()).unwrap();
    assert_eq!(parsed.header.site_id, SiteId::new("A"));
    assert_eq!(parsed.header.query_id.to_string(), qid);
    assert!(parsed.rows.iter().any(|r| r.site_id.as_str() != "A"));

    let second = call(a, req());
    assert_eq!(second.get_header("X-Mammofed-Cache"), Some("hit"));
    assert_eq!(second.body, first.body);
    assert_eq!(second.get_header("X-Mammofed-Query-Id"), Some(qid.as_str()));
}

#[test]
fn query_renders_json_on_request() {
    let n = net();
    let a = common::node(&n, "A");
    let by_param = call(
        a,
        HttpRequest::new("POST", "/query?format=json").body(r#"{"dsl": "find patients where age > 50"}"#),
    );
    let by_accept = call(
        a,
        HttpRequest::new("POST", "/query")
            .header("Accept", "application/json")
            .header("Content-Type", "application/json")
            .body(r#"{"dsl": "find patients where age > 50"}"#),
    );
    for resp in [&by_param, &by_accept] {
        assert_eq!(resp.status, 200);
        let v = json_of(resp);
        let records = v["records"].as_array().unwrap();
        assert!(!records.is_empty());
        assert!(records.iter().all(|r| r["fields"]["patient.age_years"]
            .as_str()
            .unwrap()
            .parse::<i64>()
            .unwrap()
            > 50));
        assert_eq!(v["missing"], json!([]));
        assert!(v["skipped"].is_u64());
    }
    assert_eq!(json_of(&by_param)["cache"], "miss");
    assert_eq!(json_of(&by_accept)["cache"], "hit");

    let local = json_of(&call(
        a,
        HttpRequest::new("POST", "/query?format=json").body(r#"{"dsl": "find patients", "local": true}"#),
    ));
    assert!(local["records"].as_array().unwrap().iter().all(|r| r["site"] == "A"));
}

#[test]
fn query_errors_map_to_statuses() {
    let n = net();
    let a = common::node(&n, "A");
    let bad_dsl = call(a, HttpRequest::new("POST", "/query").body("find wards"));
    assert_eq!(bad_dsl.status, 400);
    assert!(json_of(&bad_dsl)["error"].as_str().unwrap().contains("wards"));
    let both = call(
        a,
        HttpRequest::new("POST", "/query").body(r#"{"dsl": "find patients", "formal_query": "{}"}"#),
    );
    assert_eq!(both.status, 400);
    let bad_formal = call(a, HttpRequest::new("POST", "/query").body(r#"{"formal_query": "{}"}"#));
    assert_eq!(bad_formal.status, 400);
    let not_utf8 = call(a, HttpRequest::new("POST", "/query").body(vec![0xff, 0xfe]));
    assert_eq!(not_utf8.status, 400);
}

#[test]
fn missing_sites_are_reported_in_headers_and_json() {
    let n = net();
    let a = common::node(&n, "A");
    n.transport.apply(&FaultEvent::Down { site: SiteId::new("C") });
    let xml = call(a, HttpRequest::new("POST", "/query").body("find studies"));
    assert_eq!(xml.get_header("X-Mammofed-Missing"), Some("C:refused"));
    assert_eq!(xml.get_header("X-Mammofed-Cache"), Some("miss"));
    let v = json_of(&call(
        a,
        HttpRequest::new("POST", "/query?format=json").body("find studies"),
    ));
    assert_eq!(v["missing"], json!([{"site": "C", "reason": "refused"}]));
    assert_eq!(v["cache"], "miss");
}

#[test]
fn similar_uses_the_age_band() {
    let n = net();
    let a = common::node(&n, "A");
    let reference = a.store().patients().next().unwrap().clone();
    let body = |band: u32| json!({"patient_id": reference.patient_id, "criteria": {"age_band": band}}).to_string();
    let count_in_band = |band: i64| -> usize {
        n.nodes()
            .map(|node| {
                node.store()
                    .patients()
                    .filter(|p| {
                        p.patient_id != reference.patient_id && (p.age_years - reference.age_years).abs() <= band
                    })
                    .count()
            })
            .sum()
    };
    for band in [3, 5] {
        let v = json_of(&call(
            a,
            HttpRequest::new("POST", "/similar?format=json").body(body(band)),
        ));
        assert_eq!(v["records"].as_array().unwrap().len(), count_in_band(band as i64));
    }
    let defaults = call(
        a,
        HttpRequest::new("POST", "/similar").body(json!({"patient_id": reference.patient_id}).to_string()),
    );
    assert_eq!(defaults.status, 200);
    assert_eq!(parse_resultset(defaults.text()).unwrap().rows.len(), count_in_band(3));
    let unknown = call(
        a,
        HttpRequest::new("POST", "/similar").body(r#"{"patient_id": "ghost"}"#),
    );
    assert_eq!(unknown.status, 404);
}

#[test]
fn ingest_reports_each_line() {
    let n = net();
    let b = common::node(&n, "B");
    let before = b.data_version();
    let body = concat!(
        r#"{"entity": "patient", "patient_id": "NEW-1", "age_years": 52, "children_count": 0, "hrt": true}"#,
        "\n",
        r#"{"entity": "study", "study_id": "NEW-S", "patient_id": "nobody", "study_date": "2004-01-01"}"#,
        "\n",
        "not json\n",
    );
    let resp = call(b, HttpRequest::new("POST", "/ingest").body(body));
    assert_eq!(resp.status, 200);
    let v = json_of(&resp);
    assert_eq!(v["accepted"], 1);
    assert_eq!(v["rejected"].as_array().unwrap().len(), 2);
    assert_eq!(v["new_version"], before + 1);
    let p = call(b, HttpRequest::new("GET", "/patients/NEW-1"));
    assert_eq!(json_of(&p)["age_years"], 52);
}

#[test]
fn browse_routes_follow_the_hierarchy() {
    let n = net();
    let a = common::node(&n, "A");
    let (pid, sid, iid) = {
        let store = a.store();
        let img = store
            .images()
            .find(|i| store.annotations_of(&i.image_id).next().is_some())
            .unwrap();
        let study = store.study(&img.study_id).unwrap();
        (study.patient_id.clone(), study.study_id.clone(), img.image_id.clone())
    };
    let patient = json_of(&call(a, HttpRequest::new("GET", &format!("/patients/{pid}"))));
    assert_eq!(patient["patient_id"], pid.as_str());
    let studies = json_of(&call(a, HttpRequest::new("GET", &format!("/studies?patient={pid}"))));
    assert!(studies
        .as_array()
        .unwrap()
        .iter()
        .any(|s| s["study_id"] == sid.as_str()));
    let images = json_of(&call(a, HttpRequest::new("GET", &format!("/images?study={sid}"))));
    assert!(images.as_array().unwrap().iter().any(|i| i["image_id"] == iid.as_str()));
    let notes = json_of(&call(a, HttpRequest::new("GET", &format!("/annotations?image={iid}"))));
    assert!(notes.as_array().unwrap().iter().all(|n| n["image_id"] == iid.as_str()));

    assert_eq!(call(a, HttpRequest::new("GET", "/patients/ghost")).status, 404);
    assert_eq!(call(a, HttpRequest::new("GET", "/studies")).status, 400);
    assert_eq!(call(a, HttpRequest::new("GET", "/query")).status, 405);
    assert_eq!(call(a, HttpRequest::new("DELETE", "/patients/x")).status, 405);
    assert_eq!(call(a, HttpRequest::new("GET", "/elsewhere")).status, 404);
}

#[test]
fn sites_cache_and_allocation_routes() {
    let n = net();
    let a = common::node(&n, "A");
    call(a, HttpRequest::new("POST", "/query").body("find patients"));
    let sites = json_of(&call(a, HttpRequest::new("GET", "/sites")));
    assert_eq!(sites["local"]["site_id"], "A");
    let peers = sites["peers"].as_array().unwrap();
    assert_eq!(peers.len(), 2);
    assert!(peers
        .iter()
        .all(|p| p["status"] == "up" && p["last_known_version"] == 1));

    let stats = json_of(&call(a, HttpRequest::new("GET", "/cache/stats")));
    assert_eq!(
        (stats["entries"].as_u64(), stats["misses"].as_u64()),
        (Some(1), Some(1))
    );

    let first = json_of(&call(
        a,
        HttpRequest::new("POST", "/allocate").body(r#"{"patient_id": "P1"}"#),
    ));
    assert_eq!(first["patient_id"], "P1");
    assert_eq!(first["readers"].as_array().unwrap().len(), 2);
    let pair = first["pair"].as_str().unwrap().to_string();
    assert_eq!(first["pair_counts"][&pair], 1);
    let again = call(a, HttpRequest::new("POST", "/allocate").body(r#"{"patient_id": "P1"}"#));
    assert_eq!(again.status, 409);
    assert_eq!(call(a, HttpRequest::new("POST", "/allocate").body("{}")).status, 400);
}

#[test]
fn real_server_round_trip() {
    let n = net();
    let node: Arc<Node> = Arc::clone(common::node(&n, "A"));
    let mut server = HttpServer::bind(node, "127.0.0.1:0").unwrap();
    let base = format!("http://{}", server.local_addr());
    let resp = ureq::post(&format!("{base}/query?format=json"))
        .set("Authorization", &format!("Bearer {}", common::TOKEN))
        .send_string("find images where view = MLO")
        .unwrap();
    assert_eq!(resp.header("X-Mammofed-Cache"), Some("miss"));
    assert_eq!(resp.content_type(), "application/json");
    let v: Value = serde_json::from_str(&resp.into_string().unwrap()).unwrap();
    assert!(v["records"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["fields"]["image.view"] == "MLO"));
    match ureq::get(&format!("{base}/sites")).call() {
        Err(ureq::Error::Status(401, _)) => {}
        other => panic!("{other:?}"),
    }
    server.shutdown();
}
