//! Composite-node graph tracking.
//!
//! The pipeline builds a partially connected tracking graph over a clip
//! (detections plus coarse tracklets), scores its edges with a time-aware
//! message-passing network, rounds scores into flow-feasible trajectories,
//! stitches overlapping clips and evaluates the result with MOT metrics.

pub mod affinity;
pub mod error;
pub mod graph;
pub mod hungarian;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod mpn;
pub mod par;
pub mod pipeline;
pub mod solver;
pub mod stitch;

pub use error::{Error, Result};
