//! Every registered learner completes the full protocol on the synthetic
//! stream and lands well above chance on the base task.

use crescendo_core::runner::{run_experiment, ExperimentConfig, RunStatus};
use crescendo_core::LEARNER_REGISTRY;

fn config_for(model: &str, few_shot: bool) -> ExperimentConfig {
    let buffered = ["replay", "icarl", "gem", "bic", "wa", "der"].contains(&model);
    let memory = if buffered { 16 } else { 0 };
    let doc = format!(
        r#"{{
            "dataset": "synthetic", "model_name": "{model}",
            "init_cls": 4, "increment": 2, "memory_size": {memory},
            "epochs": 4, "batch_size": 16, "learning_rate": 0.01,
            "isfew_shot": {few_shot}, "kshot": 3,
            "features": {{"n_mels": 16, "clip_seconds": 0.25}},
            "hyperparameters": {{"feature_dim": 32, "acil_expansion": 256}},
            "synthetic": {{"num_classes": 8, "train_per_class": 8, "test_per_class": 5}}
        }}"#
    );
    ExperimentConfig::from_json_str(&doc).unwrap()
}

fn check_run(model: &str, few_shot: bool) {
    let config = config_for(model, few_shot);
    let bundle = run_experiment(&config)
        .unwrap_or_else(|e| panic!("{model} (few_shot={few_shot}) failed: {e}"));
    assert_eq!(bundle.status, RunStatus::Complete, "{model}");
    assert_eq!(bundle.per_stage_accuracy.len(), 3, "{model}");
    for acc in &bundle.per_stage_accuracy {
        assert!((0.0..=1.0).contains(acc), "{model}: accuracy {acc}");
    }
    // Base task: 4 classes, chance 0.25.
    assert!(
        bundle.per_stage_accuracy[0] > 0.5,
        "{model}: base accuracy {} too close to chance",
        bundle.per_stage_accuracy[0]
    );
    for loss in &bundle.train_loss_per_stage {
        assert!(loss.is_finite(), "{model}: non-finite reported loss");
    }
    for occupancy in &bundle.buffer_occupancy_per_stage {
        assert!(*occupancy <= config.memory_size, "{model}: budget exceeded");
    }
}

#[test]
fn every_registered_learner_completes_the_stream() {
    for model in LEARNER_REGISTRY {
        check_run(model, false);
    }
}

#[test]
fn few_shot_stream_works_for_metasc_and_buffered_learners() {
    for model in ["metasc", "replay", "icarl"] {
        check_run(model, true);
    }
}
