//! Hybrid-grained caching for controllable denoising pipelines.
//!
//! The crate pairs a small deterministic pipeline (control module plus a
//! guided generative module) with two cache layers:
//!
//! * [`coarse`]: whole-block reuse driven by per-step plans,
//! * [`fine`]: cross-attention reuse inside blocks,
//!
//! and measures their effect with exact MAC ledgers and latent drift
//! ([`metrics`]). [`experiment`] hosts the commands behind the `hgc` CLI.

pub mod coarse;
pub mod error;
pub mod experiment;
pub mod fine;
pub mod metrics;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
