//! Adaptation and evaluation toolkit for tabular in-context learners.

pub mod dataset;
pub mod leaderboard;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod preprocess;
pub mod resample;
pub mod rng;
pub mod tensor;
pub mod tuning;
