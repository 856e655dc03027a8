// Validation writes `!(x > 0.0)` on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod domain;
pub mod engine;
pub mod error;
pub mod exec;
pub mod model;
pub mod pacing;
pub mod planner;
pub mod report;
pub mod rng;
pub mod selector;

pub use domain::{ClientShard, Dataset, PseudoLabel, Sample};
pub use error::{FesError, Result};
pub use exec::Execution;
pub use rng::{split_stream, Rng};
