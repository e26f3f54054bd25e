//! stitchlab: a desk-scale model-stitching laboratory.
//!
//! Trains small block-structured anchor networks, jointly trains per-block
//! linear probes, measures KL-divergence similarity between intermediate
//! representations, selects stitch configurations by bucketized stitch
//! scores, finetunes stitched supernetworks, and evaluates accuracy-vs-FLOPs
//! tradeoff curves against heuristic baselines.

pub mod anchors;
pub mod artifacts;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod linalg;
pub mod probenet;
pub mod rng;
pub mod selection;
pub mod similarity;
pub mod stitching;
pub mod tensor;

pub use error::{Error, Result};
