//! Task-aware variable-rate lossy compression for streamed physiological
//! time series.
//!
//! An edge-side multi-level autoencoder compresses each fixed-length segment
//! at one of several compression gains and predicts, per level, the
//! downstream-task error the cloud would see after decompression. A selection
//! policy picks the highest gain whose predicted error stays under a
//! configured bound, falling back to no compression. The crate also ships the
//! evaluation harness (feedback-aware oracles, sweeps, metrics), a lossless
//! baseline, a parametric cloud-cost model, and the edge-to-cloud wire format.

pub mod checkpoint;
pub mod codec;
pub mod costmodel;
pub mod data;
pub mod domain;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod policy;
pub mod tasks;
pub mod training;

pub use domain::{
    average_cg, validate_level_set, BoundConfig, ClassLabel, CompressedRecord, LevelSpec, Segment,
};
pub use error::{Error, Result};
