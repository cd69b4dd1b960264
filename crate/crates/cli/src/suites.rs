//! The clinical suites, run against one site's service.
//!
//! Each suite fetches its inputs with a projected federated query and then
//! computes the report on the client.

use mammofed_core::clinical::{
    annotations_from_rows, contralateral_cohort, disagreement_report, pearson_correlation, reading_rows, to_csv,
    AllocationState, Assignment, CohortStudy, ReadingRow, ASYMMETRY_PATHS, COHORT_PATHS,
};
use mammofed_core::local::Row;
use mammofed_core::model::SiteId;
use mammofed_core::query::{encode, FormalQuery, Projection};
use mammofed_core::translator::{translate, TermDictionary};
use mammofed_core::xml::parse_resultset;
use serde::Serialize;
use serde_json::{json, Value};

use crate::client::Client;
use crate::{CliError, Format};

/// Rows of a federated query plus the raw XML they came from.
#[derive(Debug, Clone)]
pub struct Fetched {
    pub xml: String,
    pub rows: Vec<Row>,
    /// `site:reason` pairs of sites that did not answer.
    pub missing: Vec<String>,
}

/// Builds a query from raw attribute paths.
pub fn formal(dsl: &str, site: &SiteId, paths: Option<&[&str]>) -> Result<FormalQuery, CliError> {
    let mut q = translate(dsl, &TermDictionary::empty(), site).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(p) = paths {
        q.projection = Projection::Paths(p.iter().map(|s| s.to_string()).collect());
    }
    Ok(q)
}

pub fn fetch(client: &Client, q: &FormalQuery) -> Result<Fetched, CliError> {
    let body = json!({ "formal_query": encode(q) }).to_string();
    let reply = client.post("/query", "application/json", body.as_bytes())?.success()?;
    let missing = reply
        .header("X-Mammofed-Missing")
        .map(|m| m.split(',').map(str::to_string).collect())
        .unwrap_or_default();
    let xml = String::from_utf8(reply.body).map_err(|_| CliError::Protocol("result is not UTF-8".into()))?;
    let rows = parse_resultset(&xml)
        .map_err(|e| CliError::Protocol(e.to_string()))?
        .into_result_set()
        .rows;
    Ok(Fetched { xml, rows, missing })
}

fn correlation(xs: &[f64], ys: &[f64]) -> Value {
    match pearson_correlation(xs, ys) {
        Ok(r) => json!({ "n": xs.len(), "r": r }),
        Err(e) => json!({ "n": xs.len(), "r": null, "error": e.to_string() }),
    }
}

fn csv<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    to_csv(rows).map_err(|e| CliError::Protocol(e.to_string()))
}

/// One patient's density asymmetry and cohort membership.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsymmetryRow {
    pub site: SiteId,
    pub patient_id: String,
    pub asymmetry: f64,
    pub contralateral: u8,
}

/// Contralateral-cancer cohort across the grid, and how density asymmetry
/// correlates with membership.
pub fn contralateral(client: &Client, site: &SiteId, format: Format) -> Result<String, CliError> {
    let studies = fetch(
        client,
        &formal("find studies where study.diagnosis = cancer", site, Some(&COHORT_PATHS))?,
    )?;
    if format == Format::Xml {
        return Ok(studies.xml);
    }
    let cohort_input: Vec<CohortStudy> = studies.rows.iter().filter_map(CohortStudy::from_row).collect();
    let cohort = contralateral_cohort(&cohort_input);
    let images = fetch(client, &formal("find images", site, Some(&ASYMMETRY_PATHS))?)?;
    let rows: Vec<AsymmetryRow> = mammofed_core::clinical::patient_asymmetry(&images.rows)
        .into_iter()
        .map(|((s, pid), asymmetry)| AsymmetryRow {
            contralateral: cohort.contains(&(s.clone(), pid.clone())) as u8,
            site: s,
            patient_id: pid,
            asymmetry,
        })
        .collect();
    if format == Format::Csv {
        return csv(&rows);
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.asymmetry).collect();
    let ys: Vec<f64> = rows.iter().map(|r| f64::from(r.contralateral)).collect();
    let mut missing = studies.missing;
    missing.extend(images.missing);
    missing.sort();
    missing.dedup();
    Ok(json!({
        "suite": "contralateral",
        "site": site,
        "missing": missing,
        "cohort": cohort.iter().map(|(s, p)| json!({ "site": s, "patient_id": p })).collect::<Vec<_>>(),
        "asymmetry_vs_contralateral": correlation(&xs, &ys),
    })
    .to_string())
}

/// Reader allocation over the site's own patients, in patient-id order.
/// `live` uses the site's allocation desk instead of a fresh seeded state.
pub fn qc_allocate(client: &Client, site: &SiteId, seed: u64, live: bool, format: Format) -> Result<String, CliError> {
    let patients = fetch(
        client,
        &formal("find patients local", site, Some(&["patient.patient_id"]))?,
    )?;
    if format == Format::Xml {
        return Ok(patients.xml);
    }
    let mut ids: Vec<String> = patients.rows.into_iter().map(|r| r.id).collect();
    ids.sort();
    let mut assignments = Vec::with_capacity(ids.len());
    let mut pair_counts = Value::Null;
    if live {
        for id in &ids {
            let body = json!({ "patient_id": id }).to_string();
            let v = client
                .post("/allocate", "application/json", body.as_bytes())?
                .success()?
                .json()?;
            pair_counts = v["pair_counts"].clone();
            assignments.push(json!({ "patient_id": v["patient_id"], "pair": v["pair"], "readers": v["readers"] }));
        }
    } else {
        let mut state = AllocationState::new(seed);
        for id in &ids {
            let a: Assignment = state.allocate(id).map_err(|e| CliError::Usage(e.to_string()))?;
            assignments.push(json!(a));
        }
        pair_counts = json!(state.pair_counts());
    }
    if format == Format::Csv {
        #[derive(Serialize)]
        struct Line<'a> {
            patient_id: &'a str,
            pair: &'a str,
            reader_a: &'a str,
            reader_b: &'a str,
        }
        let lines: Vec<Line> = assignments
            .iter()
            .map(|a| Line {
                patient_id: a["patient_id"].as_str().unwrap_or_default(),
                pair: a["pair"].as_str().unwrap_or_default(),
                reader_a: a["readers"][0].as_str().unwrap_or_default(),
                reader_b: a["readers"][1].as_str().unwrap_or_default(),
            })
            .collect();
        return csv(&lines);
    }
    Ok(json!({
        "suite": "qc-allocate",
        "site": site,
        "seed": if live { Value::Null } else { json!(seed) },
        "patients": ids.len(),
        "pair_counts": pair_counts,
        "assignments": assignments,
    })
    .to_string())
}

/// Pairwise reader disagreement across the grid, and how disagreement with
/// CAD correlates with reader experience. `readings` selects the per-reading
/// correlation inputs for CSV output.
pub fn qc_metrics(client: &Client, site: &SiteId, readings: bool, format: Format) -> Result<String, CliError> {
    let fetched = fetch(client, &formal("find annotations", site, None)?)?;
    if format == Format::Xml {
        return Ok(fetched.xml);
    }
    let annotations = annotations_from_rows(&fetched.rows);
    let report = disagreement_report(&annotations);
    let per_reading = reading_rows(&annotations);
    if format == Format::Csv {
        return if readings {
            csv(&per_reading)
        } else {
            csv(&report.csv_rows())
        };
    }
    let with_experience: Vec<&ReadingRow> = per_reading.iter().filter(|r| r.experience_years.is_some()).collect();
    let exp: Vec<f64> = with_experience
        .iter()
        .map(|r| r.experience_years.unwrap_or_default() as f64)
        .collect();
    let mass: Vec<f64> = with_experience.iter().map(|r| r.mass_area_vs_cad_mm2).collect();
    let calc: Vec<f64> = with_experience
        .iter()
        .map(|r| f64::from(r.microcalc_diff_vs_cad))
        .collect();
    Ok(json!({
        "suite": "qc-metrics",
        "site": site,
        "missing": fetched.missing,
        "annotations": annotations.len(),
        "readers": report.readers(),
        "rows": report.rows,
        "experience_vs_mass_area": correlation(&exp, &mass),
        "experience_vs_microcalc_diff": correlation(&exp, &calc),
    })
    .to_string())
}
