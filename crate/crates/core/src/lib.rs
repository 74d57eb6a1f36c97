//! Rumor debunking pipeline: a two-branch collective-wisdom classifier, an
//! exact cosine-similarity knowledge store, and prompt assembly for a
//! pluggable text-generation backend.

pub mod autodiff;
pub mod citizen;
pub mod decision;
pub mod embedding;
pub mod expert;
pub mod harness;
pub mod knowledge;
pub mod metrics;
pub mod model;
pub mod error;
pub mod params;
pub mod persist;
pub mod prompt;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
