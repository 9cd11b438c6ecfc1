//! Incremental task schedules.
//!
//! A schedule splits a dataset's classes into an initial task followed by
//! fixed-size increments, each introducing classes no earlier task has seen.
//! Training for task `i` may touch only task `i`'s data; evaluation after
//! task `i` covers every class introduced so far. Few-shot streams keep the
//! full base task and subsample later tasks down to `n_way` classes with
//! `k_shot` clips each.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Dataset;
use crate::rng;
use crate::{ClipId, Label};

/// Default shuffling seed used when a config does not override it.
pub const DEFAULT_SEED: u64 = 1993;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("init_cls ({init_cls}) exceeds the number of classes ({num_classes})")]
    InitTooLarge { init_cls: usize, num_classes: usize },
    #[error(
        "num_classes - init_cls = {remainder_base} is not a multiple of increment {increment}"
    )]
    NotDivisible {
        remainder_base: usize,
        increment: usize,
    },
    #[error("{field} must be positive")]
    ZeroCount { field: &'static str },
    #[error("expected {expected} class labels, got {got}")]
    LabelCountMismatch { expected: usize, got: usize },
    #[error("duplicate class label {0:?}")]
    DuplicateLabel(Label),
    #[error("few-shot n_way ({n_way}) must equal increment ({increment})")]
    NWayMismatch { n_way: usize, increment: usize },
    #[error("task index {index} out of range (schedule has {num_tasks} tasks)")]
    TaskOutOfRange { index: usize, num_tasks: usize },
    #[error("few-shot session needs {need} classes but task has {have}")]
    InsufficientClasses { need: usize, have: usize },
    #[error("class {label:?} has {have} samples, few-shot session needs {need}")]
    InsufficientSamples {
        label: Label,
        have: usize,
        need: usize,
    },
}

/// Declarative description of an incremental stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub num_classes: usize,
    /// Classes in the initial task.
    pub init_cls: usize,
    /// Classes added by every later task.
    pub increment: usize,
    pub seed: u64,
    /// Subsample tasks `i >= 1` to an n-way-k-shot session.
    pub few_shot: bool,
    pub n_way: Option<usize>,
    pub k_shot: Option<usize>,
}

impl ScenarioSpec {
    pub fn new(num_classes: usize, init_cls: usize, increment: usize, seed: u64) -> Self {
        Self {
            num_classes,
            init_cls,
            increment,
            seed,
            few_shot: false,
            n_way: None,
            k_shot: None,
        }
    }

    pub fn with_few_shot(mut self, k_shot: usize) -> Self {
        self.few_shot = true;
        self.n_way = Some(self.increment);
        self.k_shot = Some(k_shot);
        self
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.num_classes == 0 {
            return Err(ScenarioError::ZeroCount {
                field: "num_classes",
            });
        }
        if self.init_cls == 0 {
            return Err(ScenarioError::ZeroCount { field: "init_cls" });
        }
        if self.init_cls > self.num_classes {
            return Err(ScenarioError::InitTooLarge {
                init_cls: self.init_cls,
                num_classes: self.num_classes,
            });
        }
        let rest = self.num_classes - self.init_cls;
        if rest > 0 {
            if self.increment == 0 {
                return Err(ScenarioError::ZeroCount { field: "increment" });
            }
            if !rest.is_multiple_of(self.increment) {
                return Err(ScenarioError::NotDivisible {
                    remainder_base: rest,
                    increment: self.increment,
                });
            }
        }
        if self.few_shot {
            let n_way = self.n_way.unwrap_or(self.increment);
            if n_way != self.increment {
                return Err(ScenarioError::NWayMismatch {
                    n_way,
                    increment: self.increment,
                });
            }
            if self.k_shot.unwrap_or(0) == 0 {
                return Err(ScenarioError::ZeroCount { field: "k_shot" });
            }
        }
        Ok(())
    }

    /// Number of tasks the spec unrolls to.
    pub fn num_tasks(&self) -> usize {
        if self.num_classes == self.init_cls {
            1
        } else {
            1 + (self.num_classes - self.init_cls) / self.increment
        }
    }
}

/// The unrolled protocol: a seeded class order and per-task label spaces.
#[derive(Debug, Clone)]
pub struct TaskSchedule {
    spec: ScenarioSpec,
    /// Seeded permutation of all class labels; logit position = index here.
    class_order: Vec<Label>,
    /// Exclusive end of each task's block in `class_order`.
    task_ends: Vec<usize>,
    positions: HashMap<Label, usize>,
}

impl TaskSchedule {
    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn num_tasks(&self) -> usize {
        self.task_ends.len()
    }

    pub fn class_order(&self) -> &[Label] {
        &self.class_order
    }

    /// Labels introduced by task `i`, in class order.
    pub fn label_space(&self, i: usize) -> Result<&[Label], ScenarioError> {
        self.check_task(i)?;
        let start = if i == 0 { 0 } else { self.task_ends[i - 1] };
        Ok(&self.class_order[start..self.task_ends[i]])
    }

    /// Labels of every class seen once task `i` is done, in class order.
    pub fn cumulative_label_space(&self, i: usize) -> Result<&[Label], ScenarioError> {
        self.check_task(i)?;
        Ok(&self.class_order[..self.task_ends[i]])
    }

    /// Number of classes seen once task `i` is done.
    pub fn classes_seen(&self, i: usize) -> Result<usize, ScenarioError> {
        self.check_task(i)?;
        Ok(self.task_ends[i])
    }

    /// Logit position of a label (its index in the class order).
    pub fn class_position(&self, label: &str) -> Option<usize> {
        self.positions.get(label).copied()
    }

    /// Task that introduced the class at `position`.
    pub fn task_of_position(&self, position: usize) -> Option<usize> {
        if position >= self.class_order.len() {
            return None;
        }
        Some(self.task_ends.partition_point(|&end| end <= position))
    }

    fn check_task(&self, i: usize) -> Result<(), ScenarioError> {
        if i >= self.num_tasks() {
            return Err(ScenarioError::TaskOutOfRange {
                index: i,
                num_tasks: self.num_tasks(),
            });
        }
        Ok(())
    }

    fn rebuild_positions(&mut self) {
        self.positions = self
            .class_order
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
    }

    /// Training samples of task `i`: exactly the dataset rows labeled with a
    /// class introduced by task `i`, in dataset order.
    pub fn task_data(&self, i: usize, dataset: &Dataset) -> Result<TaskData, ScenarioError> {
        let space: BTreeSet<&Label> = self.label_space(i)?.iter().collect();
        Ok(self.filtered(i, dataset, &space))
    }

    /// Evaluation pool after task `i`: every sample whose class has been seen.
    pub fn cumulative_test_data(
        &self,
        i: usize,
        dataset: &Dataset,
    ) -> Result<TaskData, ScenarioError> {
        let space: BTreeSet<&Label> = self.cumulative_label_space(i)?.iter().collect();
        Ok(self.filtered(i, dataset, &space))
    }

    fn filtered(&self, i: usize, dataset: &Dataset, space: &BTreeSet<&Label>) -> TaskData {
        let samples: Vec<(ClipId, Label)> = dataset
            .items()
            .iter()
            .filter(|item| space.contains(&item.label))
            .map(|item| (item.id.clone(), item.label.clone()))
            .collect();
        let present: BTreeSet<&Label> = samples.iter().map(|(_, l)| l).collect();
        let empty_classes = space
            .iter()
            .filter(|l| !present.contains(**l))
            .map(|l| (*l).clone())
            .collect();
        TaskData {
            task_index: i,
            samples,
            empty_classes,
        }
    }
}

/// Samples available to one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task_index: usize,
    /// `(clip id, label)` pairs in dataset order.
    pub samples: Vec<(ClipId, Label)>,
    /// Classes of this task's label space with no samples in the split.
    pub empty_classes: Vec<Label>,
}

impl TaskData {
    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    /// Samples grouped by label, preserving dataset order within each class.
    pub fn by_class(&self) -> BTreeMap<&Label, Vec<&ClipId>> {
        let mut map: BTreeMap<&Label, Vec<&ClipId>> = BTreeMap::new();
        for (id, label) in &self.samples {
            map.entry(label).or_default().push(id);
        }
        map
    }
}

/// Builds the task schedule for `spec` over the dataset's class labels.
///
/// The class order is a seeded Fisher-Yates shuffle of `class_labels`; the
/// first `init_cls` shuffled labels form task 0 and each following block of
/// `increment` labels forms one incremental task. Identical inputs produce a
/// bit-identical schedule.
pub fn build_schedule(
    spec: &ScenarioSpec,
    class_labels: &[Label],
) -> Result<TaskSchedule, ScenarioError> {
    spec.validate()?;
    if class_labels.len() != spec.num_classes {
        return Err(ScenarioError::LabelCountMismatch {
            expected: spec.num_classes,
            got: class_labels.len(),
        });
    }
    let mut seen = BTreeSet::new();
    for label in class_labels {
        if !seen.insert(label) {
            return Err(ScenarioError::DuplicateLabel(label.clone()));
        }
    }

    let mut class_order = class_labels.to_vec();
    class_order.shuffle(&mut rng::stream(spec.seed, "class-order"));

    let mut task_ends = vec![spec.init_cls];
    let mut end = spec.init_cls;
    while end < spec.num_classes {
        end += spec.increment;
        task_ends.push(end);
    }

    let mut schedule = TaskSchedule {
        spec: spec.clone(),
        class_order,
        task_ends,
        positions: HashMap::new(),
    };
    schedule.rebuild_positions();
    Ok(schedule)
}

/// Subsamples a task down to an `n_way`-way `k_shot`-shot session.
///
/// Classes and per-class clips are chosen by seeded shuffles, so the same
/// seed always yields the same session. Errors name the deficient class.
pub fn sample_few_shot(
    task: &TaskData,
    n_way: usize,
    k_shot: usize,
    seed: u64,
) -> Result<TaskData, ScenarioError> {
    if n_way == 0 {
        return Err(ScenarioError::ZeroCount { field: "n_way" });
    }
    if k_shot == 0 {
        return Err(ScenarioError::ZeroCount { field: "k_shot" });
    }
    let by_class = task.by_class();
    if by_class.len() < n_way {
        return Err(ScenarioError::InsufficientClasses {
            need: n_way,
            have: by_class.len(),
        });
    }
    for (label, ids) in &by_class {
        if ids.len() < k_shot {
            return Err(ScenarioError::InsufficientSamples {
                label: (*label).clone(),
                have: ids.len(),
                need: k_shot,
            });
        }
    }

    let mut classes: Vec<&Label> = by_class.keys().copied().collect();
    let mut class_rng = rng::stream(seed, &format!("few-shot-classes-{}", task.task_index));
    classes.shuffle(&mut class_rng);
    classes.truncate(n_way);
    let chosen: BTreeSet<&Label> = classes.into_iter().collect();

    let mut samples = Vec::with_capacity(n_way * k_shot);
    for (label, ids) in &by_class {
        if !chosen.contains(label) {
            continue;
        }
        let mut ids = ids.clone();
        let mut shot_rng = rng::stream(
            seed,
            &format!("few-shot-shots-{}-{}", task.task_index, label),
        );
        ids.shuffle(&mut shot_rng);
        ids.truncate(k_shot);
        samples.extend(ids.into_iter().map(|id| (id.clone(), (*label).clone())));
    }

    Ok(TaskData {
        task_index: task.task_index,
        samples,
        empty_classes: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<Label> {
        (0..n).map(|i| format!("c{i:03}")).collect()
    }

    fn task_data_from(pairs: &[(&str, &str)]) -> TaskData {
        TaskData {
            task_index: 1,
            samples: pairs
                .iter()
                .map(|(id, l)| (id.to_string(), l.to_string()))
                .collect(),
            empty_classes: Vec::new(),
        }
    }

    #[test]
    fn hundred_classes_fifty_init_ten_inc() {
        let spec = ScenarioSpec::new(100, 50, 10, DEFAULT_SEED);
        let s = build_schedule(&spec, &labels(100)).unwrap();
        assert_eq!(s.num_tasks(), 6);
        let sizes: Vec<usize> = (0..6).map(|i| s.label_space(i).unwrap().len()).collect();
        assert_eq!(sizes, vec![50, 10, 10, 10, 10, 10]);
    }

    #[test]
    fn single_task_when_init_covers_all() {
        let spec = ScenarioSpec::new(10, 10, 1, 7);
        let s = build_schedule(&spec, &labels(10)).unwrap();
        assert_eq!(s.num_tasks(), 1);
        assert_eq!(s.label_space(0).unwrap().len(), 10);
        assert_eq!(s.cumulative_label_space(0).unwrap().len(), 10);
    }

    #[test]
    fn same_seed_same_order() {
        let spec = ScenarioSpec::new(20, 10, 5, DEFAULT_SEED);
        let a = build_schedule(&spec, &labels(20)).unwrap();
        let b = build_schedule(&spec, &labels(20)).unwrap();
        assert_eq!(a.class_order(), b.class_order());
        let other = build_schedule(&ScenarioSpec::new(20, 10, 5, 7), &labels(20)).unwrap();
        assert_ne!(a.class_order(), other.class_order());
    }

    #[test]
    fn divisibility_is_enforced() {
        let spec = ScenarioSpec::new(10, 4, 4, 1);
        assert!(matches!(
            build_schedule(&spec, &labels(10)),
            Err(ScenarioError::NotDivisible { .. })
        ));
    }

    #[test]
    fn init_larger_than_total_rejected() {
        let spec = ScenarioSpec::new(5, 6, 1, 1);
        assert!(matches!(
            spec.validate(),
            Err(ScenarioError::InitTooLarge { .. })
        ));
    }

    #[test]
    fn duplicate_labels_rejected() {
        let spec = ScenarioSpec::new(3, 1, 1, 1);
        let dup = vec!["a".to_string(), "b".to_string(), "a".to_string()];
        assert!(matches!(
            build_schedule(&spec, &dup),
            Err(ScenarioError::DuplicateLabel(_))
        ));
    }

    #[test]
    fn label_spaces_partition_the_classes() {
        let spec = ScenarioSpec::new(12, 4, 2, 3);
        let s = build_schedule(&spec, &labels(12)).unwrap();
        let mut all = BTreeSet::new();
        for i in 0..s.num_tasks() {
            for l in s.label_space(i).unwrap() {
                assert!(all.insert(l.clone()), "label {l} appears in two tasks");
            }
        }
        assert_eq!(all.len(), 12);
        assert_eq!(
            s.cumulative_label_space(s.num_tasks() - 1).unwrap().len(),
            12
        );
    }

    #[test]
    fn positions_follow_class_order() {
        let spec = ScenarioSpec::new(8, 4, 2, 5);
        let s = build_schedule(&spec, &labels(8)).unwrap();
        for (i, l) in s.class_order().iter().enumerate() {
            assert_eq!(s.class_position(l), Some(i));
        }
        assert_eq!(s.class_position("nope"), None);
        assert_eq!(s.task_of_position(0), Some(0));
        assert_eq!(s.task_of_position(3), Some(0));
        assert_eq!(s.task_of_position(4), Some(1));
        assert_eq!(s.task_of_position(7), Some(2));
        assert_eq!(s.task_of_position(8), None);
    }

    #[test]
    fn few_shot_session_counts() {
        let mut pairs = Vec::new();
        for c in ["a", "b"] {
            for k in 0..20 {
                pairs.push((format!("{c}-{k}"), c.to_string()));
            }
        }
        let task = TaskData {
            task_index: 1,
            samples: pairs,
            empty_classes: Vec::new(),
        };
        let session = sample_few_shot(&task, 2, 5, 9).unwrap();
        assert_eq!(session.sample_count(), 10);
        for ids in session.by_class().values() {
            assert_eq!(ids.len(), 5);
        }
        let again = sample_few_shot(&task, 2, 5, 9).unwrap();
        assert_eq!(session.samples, again.samples);
    }

    #[test]
    fn few_shot_insufficient_samples_names_class() {
        let task = task_data_from(&[("x1", "a"), ("x2", "a"), ("y1", "b"), ("y2", "b")]);
        let err = sample_few_shot(&task, 2, 3, 1).unwrap_err();
        match err {
            ScenarioError::InsufficientSamples { label, have, need } => {
                assert_eq!(label, "a");
                assert_eq!((have, need), (2, 3));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn few_shot_insufficient_classes() {
        let task = task_data_from(&[("x1", "a"), ("x2", "a")]);
        assert!(matches!(
            sample_few_shot(&task, 2, 1, 1),
            Err(ScenarioError::InsufficientClasses { need: 2, have: 1 })
        ));
    }

    #[test]
    fn task_out_of_range() {
        let spec = ScenarioSpec::new(4, 2, 2, 1);
        let s = build_schedule(&spec, &labels(4)).unwrap();
        assert!(matches!(
            s.label_space(2),
            Err(ScenarioError::TaskOutOfRange { .. })
        ));
    }
}
