//! Training-data augmentation for event extraction: sentences generated from
//! event records, filtered by a learned keep/drop policy.
//!
//! The policy is rewarded by the change in development F1 after the extractor
//! retrains on what it kept. When the generator retrains, samples the policy
//! distrusts weigh more.
//!
//! Model-facing pieces live behind the traits in [`backends`]; the crate
//! ships deterministic mocks so the whole loop runs at desk scale.

pub mod api;
pub mod backends;
pub mod error;
pub mod event_model;
pub mod generation_training;
pub mod orchestrator;
pub mod policy;
pub mod quality_metrics;
pub mod rng;
pub mod scoring;
pub mod serialization;

pub use error::{BackendError, DataError, Error, Result};
