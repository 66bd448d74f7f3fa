//! Noisy-tracklet toolkit for unsupervised person re-identification.
//!
//! The crate covers the whole loop: simulate tracker noise (ID fragmentation
//! and ID switch) on clean tracklets, measure it, reduce it with two levels of
//! density clustering (intra-tracklet isolation, inter-tracklet association),
//! self-train a small feature model against the resulting pseudo labels with a
//! temporally averaged teacher, and score the result with retrieval metrics.

pub mod association;
pub mod cluster;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod isolation;
pub mod losses;
pub mod manifest;
pub mod model;
pub mod noise;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod simulate;
pub mod trainer;

pub use dataset::{CameraId, Dataset, FrameRecord, PersonId, Tracklet};
pub use error::{Error, ErrorCategory, Result};
pub use noise::NoiseRates;
