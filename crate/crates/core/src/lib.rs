//! Federated metadata query engine for multi-site mammogram repositories.
//!
//! A query flows through the pipeline
//! [`translator`] -> [`analyser`] -> [`local`] (and, at remote sites, the same
//! again) -> [`federation::join_results`], with [`cache`] short-circuiting
//! repeats whose contributing sites have not changed.

pub mod analyser;
pub mod cache;
pub mod clinical;
pub mod federation;
pub mod local;
pub mod model;
pub mod query;
#[cfg(feature = "testing")]
pub mod testing;
pub mod translator;
pub mod xml;
