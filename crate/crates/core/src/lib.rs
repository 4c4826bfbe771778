//! Android malware family classification from decompiled apps.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`ingest`] parses apktool-style app directories into manifest facts and
//!    per-method invocation sequences.
//! 2. [`callgraph`] and [`features`] turn those into sparse binary vectors over
//!    a global dictionary of permission, hardware, component, intent-filter and
//!    API-call-pair tokens.
//! 3. [`forest`] ranks features by out-of-bag permutation importance; the top
//!    columns are kept and their importances become distance weights.
//! 4. [`cluster`] groups training rows with a density-initialized weighted
//!    k-means, and [`ensemble`] trains one boosted classifier per cluster,
//!    weighting them per test sample by distance to the cluster centers.
//!
//! [`eval`] provides stratified cross-validation and metrics, and
//! [`pipeline`] wires everything into the commands exposed by the CLI.

pub mod callgraph;
pub mod cluster;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod features;
pub mod forest;
pub mod ingest;
pub mod num;
pub mod pipeline;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
pub use num::Scalar;
pub use pipeline::{Dataset, ModelBundle, PipelineConfig};

pub type DecisionTree64 = forest::DecisionTree<f64>;
pub type DecisionTree32 = forest::DecisionTree<f32>;
pub type ForestModel64 = forest::ForestModel<f64>;
pub type ForestModel32 = forest::ForestModel<f32>;
pub type ImportanceVector64 = forest::ImportanceVector<f64>;
pub type ImportanceVector32 = forest::ImportanceVector<f32>;
pub type ClusterModel64 = cluster::ClusterModel<f64>;
pub type ClusterModel32 = cluster::ClusterModel<f32>;
pub type WeightVector64 = cluster::WeightVector<f64>;
pub type WeightVector32 = cluster::WeightVector<f32>;
pub type BoostedClassifier64 = ensemble::BoostedClassifier<f64>;
pub type BoostedClassifier32 = ensemble::BoostedClassifier<f32>;
pub type EnsembleModel64 = ensemble::EnsembleModel<f64>;
pub type EnsembleModel32 = ensemble::EnsembleModel<f32>;
