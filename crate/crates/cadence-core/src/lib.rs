//! Cadence: a fully offline sandbox for affective music recommendation.
//!
//! A synthetic listening-log generator with known ground truth, a factorized
//! causal-transformer world model over behavioural and affective feedback,
//! a behaviour-cloned recommender fine-tuned with DPO against a
//! multi-objective utility, rollout simulation, diversity and adherence
//! metrics, and a pre-deployment stress-testing harness.

pub mod datagen;
pub mod encoder;
pub mod eval;
pub mod history;
pub mod numerics;
pub mod policy;
pub mod rollout;
pub mod worldmodel;

pub use numerics::NumericsError;
