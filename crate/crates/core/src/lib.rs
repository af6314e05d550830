//! Concept learning on whole-slide patch features and explainable survival
//! analysis.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`ingest`] loads precomputed patch embeddings, concept labels, survival
//!    outcomes and demographics, and joins them into a [`StudyDataset`].
//! 2. [`graph`] turns each slide's patches into a k-nearest-neighbour spatial
//!    graph ([`WsiGraph`]).
//! 3. [`concepts`] trains a graph-attention concept bottleneck model
//!    ([`CbmModel`]) with one gated attention pool per concept, built on the
//!    hand-differentiated layers in [`nn`].
//! 4. [`survival`] fits ridge-penalised Cox models on concept scores, and
//!    provides Kaplan-Meier curves and log-rank tests.
//! 5. [`metrics`] and [`harness`] evaluate everything under seeded
//!    cross-validation, stratify patients into risk groups and check
//!    subgroup fairness.

pub mod concepts;
pub mod error;
pub mod graph;
pub mod harness;
pub mod ingest;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod survival;

pub use concepts::{CbmModel, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use graph::WsiGraph;
pub use ingest::{ConceptLabels, ConceptVocabulary, StudyDataset, SurvivalRecord};
pub use nn::DenseMatrix;
pub use survival::{CoxModel, KmCurve, LogRankResult};
