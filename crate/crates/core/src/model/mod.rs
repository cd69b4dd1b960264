//! Per-site metadata schema and the embedded store that holds it.

mod records;
mod schema;
mod store;

pub use records::*;
pub use schema::{attribute, entity_paths, AttributeDef, Entity, Value, ValueKind, ATTRIBUTES};
pub use store::{IngestError, IngestReport, SiteStore};
