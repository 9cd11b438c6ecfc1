//! Cumulative evaluation: per-stage top-1 accuracy and its average.
//!
//! After task `i` the learner is scored on every test sample whose class has
//! been seen so far. Score columns beyond the stage's label space are masked
//! out before the argmax, so extra head capacity can never leak predictions
//! of unseen classes.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{Dataset, FeatureStore};
use crate::learner::{Learner, LearnerError};
use crate::scenario::{ScenarioError, TaskSchedule};
use crate::ClipId;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cumulative test set for stage {0} is empty")]
    EmptyTestSet(usize),
    #[error("average of an empty accuracy list")]
    EmptyAccuracyList,
    #[error("stage {stage} row has {got} entries, expected {expected}")]
    RowLength {
        stage: usize,
        got: usize,
        expected: usize,
    },
    #[error("accuracy {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
}

/// Lower-triangular record of accuracies: `entry(i, j)` is the accuracy on
/// task `j`'s test data after training task `i`, and `per_stage[i]` the
/// accuracy on the full cumulative test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
    per_stage: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self {
            rows: Vec::new(),
            per_stage: Vec::new(),
        }
    }

    pub fn push_stage(&mut self, row: Vec<f64>, stage_accuracy: f64) -> Result<(), EvalError> {
        let stage = self.rows.len();
        if row.len() != stage + 1 {
            return Err(EvalError::RowLength {
                stage,
                got: row.len(),
                expected: stage + 1,
            });
        }
        for &v in row.iter().chain(std::iter::once(&stage_accuracy)) {
            if !(0.0..=1.0).contains(&v) {
                return Err(EvalError::OutOfRange(v));
            }
        }
        self.rows.push(row);
        self.per_stage.push(stage_accuracy);
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.per_stage.len()
    }

    pub fn entry(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn per_stage(&self) -> &[f64] {
        &self.per_stage
    }

    /// Average incremental accuracy over all stages recorded so far.
    pub fn average(&self) -> Result<f64, EvalError> {
        average_accuracy(&self.per_stage)
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Arithmetic mean of the per-stage accuracies.
pub fn average_accuracy(per_stage: &[f64]) -> Result<f64, EvalError> {
    if per_stage.is_empty() {
        return Err(EvalError::EmptyAccuracyList);
    }
    Ok(per_stage.iter().sum::<f64>() / per_stage.len() as f64)
}

/// One evaluation pass after training task `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageEval {
    /// Top-1 accuracy on the cumulative test set.
    pub stage_accuracy: f64,
    /// Accuracy on each earlier task's test subset, `j <= i`.
    pub per_task: Vec<f64>,
    /// Sample count behind each `per_task` entry.
    pub per_task_counts: Vec<usize>,
}

/// Masked argmax: positions at or beyond `limit` are ignored; the first
/// maximum wins, so ties resolve to the earliest class order position.
pub fn masked_argmax(scores: ArrayView2<f64>, limit: usize) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (c, &v) in row.iter().enumerate().take(limit) {
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            best
        })
        .collect()
}

/// Evaluates a trained learner after stage `i` on the cumulative test set.
pub fn evaluate_stage(
    learner: &dyn Learner,
    schedule: &TaskSchedule,
    i: usize,
    test: &Dataset,
    store: &FeatureStore,
) -> Result<StageEval, EvalError> {
    let pool = schedule.cumulative_test_data(i, test)?;
    if pool.samples.is_empty() {
        return Err(EvalError::EmptyTestSet(i));
    }
    let limit = schedule.classes_seen(i)?;

    let mut correct_total = 0usize;
    let mut per_task_correct = vec![0usize; i + 1];
    let mut per_task_count = vec![0usize; i + 1];

    for chunk in pool.samples.chunks(256) {
        let ids: Vec<&ClipId> = chunk.iter().map(|(id, _)| id).collect();
        let scores = learner.scores(&ids, store)?;
        let predictions = masked_argmax(scores.view(), limit);
        for ((_, label), &pred) in chunk.iter().zip(&predictions) {
            let truth = schedule
                .class_position(label)
                .expect("cumulative pool labels are scheduled");
            let task = schedule
                .task_of_position(truth)
                .expect("position within schedule");
            per_task_count[task] += 1;
            if pred == truth {
                per_task_correct[task] += 1;
                correct_total += 1;
            }
        }
    }

    let per_task: Vec<f64> = per_task_correct
        .iter()
        .zip(&per_task_count)
        .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    Ok(StageEval {
        stage_accuracy: correct_total as f64 / pool.samples.len() as f64,
        per_task,
        per_task_counts: per_task_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn average_matches_trivial_cases() {
        assert_eq!(average_accuracy(&[1.0, 0.5]).unwrap(), 0.75);
        assert!((average_accuracy(&[0.4, 0.4, 0.4]).unwrap() - 0.4).abs() < 1e-15);
        assert!(matches!(
            average_accuracy(&[]),
            Err(EvalError::EmptyAccuracyList)
        ));
    }

    // Oracle: independent mean computation on pseudo-random lists.
    #[test]
    fn average_matches_direct_mean() {
        let mut state = 5u64;
        for len in 1..20 {
            let xs: Vec<f64> = (0..len)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(7);
                    ((state >> 33) as f64 / (1u64 << 31) as f64).clamp(0.0, 1.0)
                })
                .collect();
            let mut acc = 0.0;
            for x in &xs {
                acc += x;
            }
            let expect = acc / len as f64;
            assert!((average_accuracy(&xs).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn matrix_enforces_row_shape_and_range() {
        let mut m = AccuracyMatrix::new();
        m.push_stage(vec![1.0], 1.0).unwrap();
        assert!(matches!(
            m.push_stage(vec![0.5], 0.5),
            Err(EvalError::RowLength { .. })
        ));
        assert!(matches!(
            m.push_stage(vec![0.5, 1.2], 0.5),
            Err(EvalError::OutOfRange(_))
        ));
        m.push_stage(vec![0.5, 1.0], 0.75).unwrap();
        assert_eq!(m.entry(1, 0), Some(0.5));
        assert_eq!(m.average().unwrap(), 0.875);
    }

    #[test]
    fn masked_argmax_ignores_unseen_columns() {
        let scores = array![[0.1, 0.9, 100.0], [0.7, 0.2, 50.0]];
        // With the third column masked, predictions change.
        assert_eq!(masked_argmax(scores.view(), 2), vec![1, 0]);
        assert_eq!(masked_argmax(scores.view(), 3), vec![2, 2]);
    }

    #[test]
    fn masked_argmax_tie_breaks_to_first() {
        let scores = array![[0.5, 0.5, 0.5]];
        assert_eq!(masked_argmax(scores.view(), 3), vec![0]);
    }
}
