//! Experiment orchestration: config in, results bundle (and curves) out.
//!
//! A run is deterministic for a fixed config: dataset resolution, schedule
//! construction, feature extraction, training, and evaluation all derive
//! their randomness from the single config seed. Only the wall-clock fields
//! of the bundle differ between reruns. If a stage fails, everything
//! completed so far is flushed to `output_dir` before the error surfaces.

mod config;
mod plot;
mod results;

pub use config::{ConfigError, ExperimentConfig, SyntheticConfig};
pub use plot::{emit_plot, PlotError};
pub use results::{validate_results_value, ResultsBundle, RunStatus, RESULTS_SCHEMA_VERSION};

use std::path::PathBuf;
use std::time::Instant;

use thiserror::Error;

use crate::audio::{generate_synthetic, load_dataset, DataError, Dataset, FeatureStore, Split};
use crate::eval::{evaluate_stage, AccuracyMatrix, EvalError, StageEval};
use crate::learner::{build_learner, Learner, LearnerError, LearnerSpec, TaskContext, TaskStats};
use crate::scenario::{build_schedule, sample_few_shot, ScenarioError, ScenarioSpec, TaskSchedule};
use crate::ClipId;

/// Feature-cache directory override, read from the environment.
pub const CACHE_ENV_VAR: &str = "AUDIOCIL_CACHE";

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<RunnerError>,
    },
    #[error("dataset {0:?} needs a manifest_path")]
    ManifestRequired(String),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset), RunnerError> {
    if config.dataset == "synthetic" {
        let s = &config.synthetic;
        let train =
            generate_synthetic(s.num_classes, s.train_per_class, config.seed, Split::Train)?;
        let test = generate_synthetic(s.num_classes, s.test_per_class, config.seed, Split::Test)?;
        return Ok((train, test));
    }
    let manifest = config
        .manifest_path
        .as_ref()
        .ok_or_else(|| RunnerError::ManifestRequired(config.dataset.clone()))?;
    let train = load_dataset(&config.dataset, manifest, Split::Train)?;
    let test = load_dataset(&config.dataset, manifest, Split::Test)?;
    Ok((train, test))
}

fn scenario_of(config: &ExperimentConfig, num_classes: usize) -> ScenarioSpec {
    let mut spec = ScenarioSpec::new(num_classes, config.init_cls, config.increment, config.seed);
    if config.isfew_shot {
        spec = spec.with_few_shot(config.kshot);
    }
    spec
}

fn run_stage(
    learner: &mut dyn Learner,
    schedule: &TaskSchedule,
    stage: usize,
    train: &Dataset,
    test: &Dataset,
    store: &FeatureStore,
    config: &ExperimentConfig,
) -> Result<(TaskStats, StageEval), RunnerError> {
    let task = schedule.task_data(stage, train)?;
    for label in &task.empty_classes {
        eprintln!("warning: class {label:?} has no training samples in task {stage}");
    }
    let effective = if config.isfew_shot && stage > 0 {
        let spec = schedule.spec();
        sample_few_shot(
            &task,
            spec.n_way.unwrap_or(spec.increment),
            spec.k_shot.unwrap_or(config.kshot),
            config.seed,
        )?
    } else {
        task
    };
    let samples: Vec<(ClipId, usize)> = effective
        .samples
        .iter()
        .map(|(id, label)| {
            (
                id.clone(),
                schedule
                    .class_position(label)
                    .expect("task labels come from the schedule"),
            )
        })
        .collect();
    let ctx = TaskContext {
        task_index: stage,
        schedule,
        train: &samples,
        store,
        epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
    };
    let stats = learner.run_task(&ctx)?;
    let eval = evaluate_stage(learner, schedule, stage, test, store)?;
    Ok((stats, eval))
}

/// Where the results JSON lands for a config with an `output_dir`.
pub fn results_path(config: &ExperimentConfig) -> Option<PathBuf> {
    config.output_dir.as_ref().map(|d| d.join("results.json"))
}

fn flush(bundle: &ResultsBundle, config: &ExperimentConfig) -> Result<(), RunnerError> {
    let Some(path) = results_path(config) else {
        return Ok(());
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| RunnerError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(&path, bundle.to_json()).map_err(|source| RunnerError::Io { path, source })
}

/// Runs the full incremental protocol described by `config`.
///
/// Builds the schedule, then per task: (few-shot subsample when configured)
/// -> `run_task` -> cumulative evaluation. The bundle is written to
/// `output_dir/results.json` when an output directory is configured; a
/// failing stage flushes the partial bundle before returning the error.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultsBundle, RunnerError> {
    config.validate()?;
    let (train, test) = load_datasets(config)?;
    let labels = train.class_labels();
    let spec = scenario_of(config, labels.len());
    let schedule = build_schedule(&spec, &labels)?;

    let cache_dir = std::env::var_os(CACHE_ENV_VAR).map(PathBuf::from);
    let store = FeatureStore::build(&[&train, &test], &config.features, cache_dir.as_deref())?;

    let mut learner = build_learner(
        &config.model_name,
        &LearnerSpec {
            convnet_type: &config.convnet_type,
            memory_size: config.memory_size,
            seed: config.seed,
            hp: &config.hyperparameters,
        },
    )?;

    let mut bundle = ResultsBundle::new(config.clone(), schedule.class_order().to_vec());
    let mut matrix = AccuracyMatrix::new();
    for stage in 0..schedule.num_tasks() {
        let started = Instant::now();
        match run_stage(
            learner.as_mut(),
            &schedule,
            stage,
            &train,
            &test,
            &store,
            config,
        ) {
            Ok((stats, eval)) => {
                matrix.push_stage(eval.per_task.clone(), eval.stage_accuracy)?;
                bundle
                    .classes_seen_per_stage
                    .push(schedule.classes_seen(stage)?);
                bundle
                    .buffer_occupancy_per_stage
                    .push(learner.buffer().map_or(0, |b| b.len()));
                bundle.train_loss_per_stage.push(stats.mean_loss);
                bundle
                    .wall_clock_seconds_per_stage
                    .push(started.elapsed().as_secs_f64());
            }
            Err(source) => {
                bundle.absorb_matrix(&matrix);
                bundle.status = RunStatus::Aborted;
                if let Err(flush_err) = flush(&bundle, config) {
                    eprintln!("warning: could not flush partial results: {flush_err}");
                }
                return Err(RunnerError::Stage {
                    stage,
                    source: Box::new(source),
                });
            }
        }
    }
    bundle.absorb_matrix(&matrix);
    bundle.status = RunStatus::Complete;
    flush(&bundle, config)?;
    Ok(bundle)
}
