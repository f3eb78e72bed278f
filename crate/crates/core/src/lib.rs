//! Core logic for turning pancreatic cyst findings in radiology reports into
//! validated records, and for checking and scoring those records.

pub mod consensus;
pub mod cost;
pub mod derive;
pub mod evalstats;
pub mod grounding;
pub mod risk;
pub mod schema;

pub use schema::{FeatureKey, PclFeatureRecord};
