//! Domain-general structured pruning ("doge tickets") for small transformer
//! encoders: masked encoder, per-domain expressive scores, variance-penalized
//! domain-general scores, ticket selection, rewinding and out-of-domain
//! evaluation.

pub mod analysis;
pub mod checksum;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod plot;
pub mod pruning;
pub mod scoring;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
