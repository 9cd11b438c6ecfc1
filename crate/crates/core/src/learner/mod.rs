//! Incremental-learning strategies behind a shared task lifecycle.
//!
//! A [`Learner`] consumes tasks strictly in order. `run_task` covers the
//! whole lifecycle: widen the classifier to the task's cumulative label
//! space, run the training epochs, then do whatever finalization the
//! algorithm calls for (replay-buffer rebuild, bias calibration, weight
//! alignment, Fisher estimation). Names are resolved through
//! [`build_learner`]; the registry also names the algorithms that ship as
//! registry entries elsewhere but are intentionally not implemented here.

mod acil;
mod fisher;
mod gem;
pub mod losses;
mod strategies;

pub use acil::AcilState;
pub use fisher::fisher_diagonal;
pub use gem::gem_project;
pub use strategies::{replay_batch_mix, wa_align};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::FeatureStore;
use crate::linalg::LinalgError;
use crate::memory::{MemoryError, ReplayBuffer};
use crate::model::ModelError;
use crate::scenario::{ScenarioError, TaskSchedule};
use crate::ClipId;

/// Implemented strategy names, as accepted by `model_name` in configs.
pub const LEARNER_REGISTRY: &[&str] = &[
    "finetune", "replay", "ewc", "lwf", "icarl", "gem", "bic", "wa", "podnet", "der", "acil",
    "metasc",
];

/// Declared in the algorithm family but out of scope for this toolkit.
pub const UNIMPLEMENTED_LEARNERS: &[&str] = &["coil", "pan", "amfo"];

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error(
        "unknown learner {name:?}; implemented: {known:?}; declared but unimplemented: {unimplemented:?}"
    )]
    UnknownLearner {
        name: String,
        known: Vec<String>,
        unimplemented: Vec<String>,
    },
    #[error("learner {0:?} requires a replay buffer; set memory_size > 0")]
    NeedsBuffer(&'static str),
    #[error("task {got} out of order; this learner expects task {expected} next")]
    TaskOrder { expected: usize, got: usize },
    #[error("non-finite loss at step {step} of task {task}")]
    NonFiniteLoss { task: usize, step: usize },
    #[error("label position {label} >= classifier width {width}")]
    LabelOutOfRange { label: usize, width: usize },
    #[error("distillation temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("distillation needs a non-empty old-class set")]
    EmptyOldClasses,
    #[error("gradient projection did not converge (kkt residual {residual:.3e})")]
    QpNonConvergence { residual: f64 },
    #[error("projected gradient violates constraint {index} by {violation:.3e}")]
    ConstraintViolated { index: usize, violation: f64 },
    #[error("ridge state lost positive definiteness")]
    RidgeStateNotPd,
    #[error("classifier head row {0} has zero norm; alignment ratio undefined")]
    ZeroNormRow(usize),
    #[error("empty data: {0}")]
    EmptyData(&'static str),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Algorithm hyperparameters with desk-scale defaults; every field can be
/// overridden from the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Distillation temperature.
    pub kd_temperature: f64,
    pub kd_weight: f64,
    pub ewc_lambda: f64,
    pub acil_gamma: f64,
    pub acil_expansion: usize,
    pub pod_weight: f64,
    pub gem_margin: f64,
    /// SGD momentum shared by all gradient-trained learners.
    pub momentum: f64,
    /// Backbone embedding width.
    pub feature_dim: usize,
    pub der_aux_weight: f64,
    /// Start each new branch from the previous branch's weights.
    pub der_clone_branch: bool,
    pub bic_steps: usize,
    pub bic_lr: f64,
    pub bic_val_fraction: f64,
    /// Cosine logit scale of the stochastic classifier.
    pub sc_scale: f64,
    pub sc_refine_steps: usize,
    pub sc_refine_lr: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            kd_temperature: 2.0,
            kd_weight: 1.0,
            ewc_lambda: 5000.0,
            acil_gamma: 1.0,
            acil_expansion: 1024,
            pod_weight: 1.0,
            gem_margin: 0.0,
            momentum: 0.9,
            feature_dim: 64,
            der_aux_weight: 1.0,
            der_clone_branch: false,
            bic_steps: 500,
            bic_lr: 0.05,
            bic_val_fraction: 0.1,
            sc_scale: 16.0,
            sc_refine_steps: 30,
            sc_refine_lr: 0.01,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let positive = [
            ("kd_temperature", self.kd_temperature),
            ("acil_gamma", self.acil_gamma),
            ("momentum_bound", 1.0 - self.momentum),
            ("sc_scale", self.sc_scale),
            ("bic_lr", self.bic_lr),
            ("sc_refine_lr", self.sc_refine_lr),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(LearnerError::Shape(format!("{name} must be positive")));
            }
        }
        let nonnegative = [
            ("kd_weight", self.kd_weight),
            ("ewc_lambda", self.ewc_lambda),
            ("pod_weight", self.pod_weight),
            ("gem_margin", self.gem_margin),
            ("momentum", self.momentum),
            ("der_aux_weight", self.der_aux_weight),
        ];
        for (name, v) in nonnegative {
            if v.is_nan() || v < 0.0 {
                return Err(LearnerError::Shape(format!("{name} must be >= 0")));
            }
        }
        if self.feature_dim == 0 || self.acil_expansion == 0 {
            return Err(LearnerError::Shape(
                "feature_dim and acil_expansion must be positive".into(),
            ));
        }
        if !(self.bic_val_fraction > 0.0 && self.bic_val_fraction < 1.0) {
            return Err(LearnerError::Shape(
                "bic_val_fraction must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Everything a learner needs to run one task.
pub struct TaskContext<'a> {
    pub task_index: usize,
    pub schedule: &'a TaskSchedule,
    /// Current task's training samples as `(clip id, class position)`.
    pub train: &'a [(ClipId, usize)],
    pub store: &'a FeatureStore,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskStats {
    pub mean_loss: f64,
    pub steps: usize,
}

/// A pluggable incremental-learning strategy.
pub trait Learner: Send {
    fn name(&self) -> &'static str;

    /// Runs the complete lifecycle for the next task in the stream.
    fn run_task(&mut self, ctx: &TaskContext) -> Result<TaskStats, LearnerError>;

    /// Class scores for the given clips, one row per clip, one column per
    /// class position seen so far. Higher is better; argmax is the
    /// prediction.
    fn scores(&self, ids: &[&ClipId], store: &FeatureStore) -> Result<Array2<f64>, LearnerError>;

    /// Number of class positions the learner currently covers.
    fn classes_seen(&self) -> usize;

    /// The replay buffer, for learners that keep one.
    fn buffer(&self) -> Option<&ReplayBuffer> {
        None
    }

    /// Flat parameters of the frozen feature extractor, for learners that
    /// freeze one after the base task; lets invariant checks assert
    /// bit-identity across incremental sessions.
    fn frozen_backbone_params(&self) -> Option<ndarray::Array1<f64>> {
        None
    }
}

/// What [`build_learner`] needs besides the name.
pub struct LearnerSpec<'a> {
    pub convnet_type: &'a str,
    pub memory_size: usize,
    pub seed: u64,
    pub hp: &'a HyperParams,
}

/// Resolves a registry name to a fresh learner instance.
pub fn build_learner(name: &str, spec: &LearnerSpec) -> Result<Box<dyn Learner>, LearnerError> {
    spec.hp.validate()?;
    strategies::build(name, spec)
}

// ---- shared training plumbing -------------------------------------------

/// Seeded epoch batching: a shuffled permutation cut into batches.
pub(crate) fn shuffled_batches(
    n: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
