//! Audio class-incremental learning toolkit.
//!
//! The crate is organized around the incremental-learning protocol: a
//! [`scenario`] splits a dataset's classes into a stream of tasks with
//! disjoint label spaces, [`learner`]s train on one task at a time (optionally
//! replaying exemplars kept by [`memory`]), and [`eval`] measures cumulative
//! top-1 accuracy after every stage. [`runner`] ties the pieces together
//! behind a JSON experiment config and emits result bundles and accuracy
//! curves. [`audio`] provides dataset ingestion, log-mel feature extraction,
//! and a synthetic separable dataset for desk-scale experiments.

pub mod audio;
pub mod eval;
pub mod learner;
pub mod linalg;
pub mod memory;
pub mod model;
pub mod rng;
pub mod runner;
pub mod scenario;

pub use audio::{AudioClip, Dataset, FeatureConfig, FeatureStore, FeatureTensor};
pub use eval::{average_accuracy, evaluate_stage, AccuracyMatrix, StageEval};
pub use learner::{build_learner, Learner, LEARNER_REGISTRY, UNIMPLEMENTED_LEARNERS};
pub use memory::ReplayBuffer;
pub use model::{build_backbone, Backbone, IncrementalModel};
pub use runner::{run_experiment, ExperimentConfig, ResultsBundle};
pub use scenario::{ScenarioSpec, TaskData, TaskSchedule};

/// Class label as it appears in dataset manifests.
pub type Label = String;

/// Unique identifier of one audio clip.
pub type ClipId = String;
