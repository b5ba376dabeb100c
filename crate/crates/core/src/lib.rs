//! Uniformity-optimized text-only sequential recommendation.
//!
//! The crate trains transformer rankers whose item representations come from
//! frozen text embeddings pushed through a trainable projection MLP, and
//! regularizes those representations with pairwise uniformity losses
//! (`general`, `seq`, `pop`). Everything downstream of a fixed seed is
//! deterministic: rerunning the same config byte-reproduces logs,
//! checkpoints, and reports.
//!
//! Module map:
//! - [`data`]: interaction ingestion, sequence building, leave-one-out split,
//!   popularity and corpus statistics.
//! - [`encoder`]: frozen text vectors, either a seeded hashing encoder or an
//!   external embedding cache, plus the cache file format.
//! - [`autodiff`]: a small tape-based reverse-mode engine over `f64`
//!   matrices; all training gradients flow through it.
//! - [`mlp`], [`backbone`]: the projection MLP and the causal/masked
//!   transformer backbones.
//! - [`uniformity`]: the three losses and the held-out uniformity metric.
//! - [`train`]: Adam, batching, the combined objective, checkpoints.
//! - [`eval`]: leave-one-out ranking metrics.
//! - [`analysis`]: embedding-geometry diagnostics (intra-sequence ratio,
//!   popularity split, 2-D KDE export).
//! - [`experiment`]: TOML config and end-to-end orchestration used by the
//!   CLI.
//! - [`synth`]: deterministic synthetic corpora for tests and demos.

pub mod analysis;
pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod mlp;
pub mod params;
pub mod rng;
pub mod synth;
pub mod train;
pub mod uniformity;

pub use error::{Result, UnitError};
