//! Graph-embedded transformer for multi-agent trajectory prediction with
//! optional domain-adversarial training.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod rng;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
