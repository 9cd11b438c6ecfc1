//! Results bundle: the JSON artifact one experiment produces.

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::eval::AccuracyMatrix;
use crate::Label;

pub const RESULTS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    /// A stage failed; the bundle holds everything finished before it.
    Aborted,
}

/// Everything a run produces, ready for plotting and comparison. All fields
/// except the wall-clock times are deterministic functions of the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsBundle {
    pub schema_version: u32,
    pub toolkit_version: String,
    pub status: RunStatus,
    pub config: ExperimentConfig,
    pub class_order: Vec<Label>,
    /// `|cumulative label space|` after each stage; the curve's x axis.
    pub classes_seen_per_stage: Vec<usize>,
    /// Cumulative top-1 accuracy after each stage; the curve's y axis.
    pub per_stage_accuracy: Vec<f64>,
    /// Lower-triangular per-task accuracies, row `i` has `i + 1` entries.
    pub accuracy_matrix: Vec<Vec<f64>>,
    pub average_accuracy: f64,
    pub buffer_occupancy_per_stage: Vec<usize>,
    pub train_loss_per_stage: Vec<f64>,
    pub wall_clock_seconds_per_stage: Vec<f64>,
}

impl ResultsBundle {
    pub fn new(config: ExperimentConfig, class_order: Vec<Label>) -> Self {
        Self {
            schema_version: RESULTS_SCHEMA_VERSION,
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            status: RunStatus::Aborted,
            config,
            class_order,
            classes_seen_per_stage: Vec::new(),
            per_stage_accuracy: Vec::new(),
            accuracy_matrix: Vec::new(),
            average_accuracy: 0.0,
            buffer_occupancy_per_stage: Vec::new(),
            train_loss_per_stage: Vec::new(),
            wall_clock_seconds_per_stage: Vec::new(),
        }
    }

    pub fn absorb_matrix(&mut self, matrix: &AccuracyMatrix) {
        self.accuracy_matrix = matrix.rows().to_vec();
        self.per_stage_accuracy = matrix.per_stage().to_vec();
        self.average_accuracy = matrix.average().unwrap_or(0.0);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }

    /// Serialization with timing stripped; equal across reruns of one config.
    pub fn comparable_json(&self) -> String {
        let mut clone = self.clone();
        clone.wall_clock_seconds_per_stage = vec![0.0; self.wall_clock_seconds_per_stage.len()];
        serde_json::to_string_pretty(&clone).expect("bundle serializes")
    }
}

/// Validates an arbitrary JSON value against the published results schema.
/// Returns every violation found, empty when the document conforms.
pub fn validate_results_value(value: &serde_json::Value) -> Vec<String> {
    let mut problems = Vec::new();
    let Some(obj) = value.as_object() else {
        return vec!["results document must be a JSON object".into()];
    };

    let expect_type = |problems: &mut Vec<String>, key: &str, kind: &str| {
        let Some(v) = obj.get(key) else {
            problems.push(format!("missing field {key:?}"));
            return;
        };
        let ok = match kind {
            "uint" => v.is_u64(),
            "string" => v.is_string(),
            "number" => v.is_number(),
            "object" => v.is_object(),
            "array" => v.is_array(),
            _ => unreachable!(),
        };
        if !ok {
            problems.push(format!("field {key:?} must be a {kind}"));
        }
    };

    expect_type(&mut problems, "schema_version", "uint");
    expect_type(&mut problems, "toolkit_version", "string");
    expect_type(&mut problems, "status", "string");
    expect_type(&mut problems, "config", "object");
    expect_type(&mut problems, "class_order", "array");
    expect_type(&mut problems, "classes_seen_per_stage", "array");
    expect_type(&mut problems, "per_stage_accuracy", "array");
    expect_type(&mut problems, "accuracy_matrix", "array");
    expect_type(&mut problems, "average_accuracy", "number");
    expect_type(&mut problems, "buffer_occupancy_per_stage", "array");
    expect_type(&mut problems, "train_loss_per_stage", "array");
    expect_type(&mut problems, "wall_clock_seconds_per_stage", "array");

    if let Some(status) = obj.get("status").and_then(|v| v.as_str()) {
        if status != "complete" && status != "aborted" {
            problems.push(format!(
                "status must be complete or aborted, got {status:?}"
            ));
        }
    }

    let stage_count = obj
        .get("per_stage_accuracy")
        .and_then(|v| v.as_array())
        .map(Vec::len);
    if let Some(n) = stage_count {
        for key in [
            "classes_seen_per_stage",
            "accuracy_matrix",
            "buffer_occupancy_per_stage",
            "train_loss_per_stage",
            "wall_clock_seconds_per_stage",
        ] {
            if let Some(arr) = obj.get(key).and_then(|v| v.as_array()) {
                if arr.len() != n {
                    problems.push(format!(
                        "field {key:?} has {} entries, expected {n}",
                        arr.len()
                    ));
                }
            }
        }
        if let Some(rows) = obj.get("accuracy_matrix").and_then(|v| v.as_array()) {
            for (i, row) in rows.iter().enumerate() {
                match row.as_array() {
                    Some(r) if r.len() == i + 1 => {}
                    _ => problems.push(format!(
                        "accuracy_matrix row {i} must have {} entries",
                        i + 1
                    )),
                }
            }
        }
        if let Some(accs) = obj.get("per_stage_accuracy").and_then(|v| v.as_array()) {
            for (i, v) in accs.iter().enumerate() {
                match v.as_f64() {
                    Some(a) if (0.0..=1.0).contains(&a) => {}
                    _ => problems.push(format!("per_stage_accuracy[{i}] outside [0, 1]")),
                }
            }
        }
    }
    problems
}
