//! Repetitive action counting with multi-scale periodic representations and
//! repetition foreground localization, trained on synthetic embeddings.

// `!(x < y)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod mpr;
pub mod rfl;
pub mod seed;
pub mod supervision;
pub mod synthgen;
pub mod tensorcore;

pub use error::{LmrlError, Result};
pub use fusion::{DensityMap, FusionConfig, FusionMode};
pub use harness::RunConfig;
pub use metrics::EvalReport;
pub use model::ModelConfig;
pub use mpr::MprConfig;
pub use rfl::RflConfig;
pub use supervision::LossConfig;
pub use synthgen::{CycleAnnotations, GenConfig, LabeledSequence};
