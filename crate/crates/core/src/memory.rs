//! Fixed-budget replay memory with herding-based exemplar selection.
//!
//! The buffer stores clip ids only; features are re-extracted with whatever
//! model is current, so exemplar embeddings always match the evolving
//! backbone. The total budget is a single scalar shared across all seen
//! classes: each rebuild assigns `floor(budget / classes)` slots per class
//! and hands the remainder, one slot each, to the earliest classes in class
//! order. Shrinking a class keeps the herding-order prefix.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{ClipId, Label};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("herding asked for {m} exemplars from {n} candidates")]
    NotEnoughCandidates { m: usize, n: usize },
    #[error("memory budget {budget} is smaller than the number of seen classes {classes}")]
    BudgetTooSmall { budget: usize, classes: usize },
    #[error("class {0:?} has no exemplars")]
    EmptyClass(Label),
    #[error("class {0:?} mean has zero norm (antipodal features)")]
    DegenerateMean(Label),
    #[error("feature rows ({rows}) do not match candidate count ({candidates})")]
    FeatureCountMismatch { rows: usize, candidates: usize },
}

/// Budgeted exemplar store. Lists are kept in herding order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayBuffer {
    memory_size: usize,
    per_class: BTreeMap<Label, Vec<ClipId>>,
}

impl ReplayBuffer {
    pub fn new(memory_size: usize) -> Self {
        Self {
            memory_size,
            per_class: BTreeMap::new(),
        }
    }

    pub fn memory_size(&self) -> usize {
        self.memory_size
    }

    /// Total exemplars currently stored.
    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> impl Iterator<Item = &Label> {
        self.per_class.keys()
    }

    pub fn exemplars(&self, label: &str) -> Option<&[ClipId]> {
        self.per_class.get(label).map(Vec::as_slice)
    }

    /// All `(id, label)` pairs, grouped by class in sorted label order.
    pub fn all_entries(&self) -> Vec<(ClipId, Label)> {
        self.per_class
            .iter()
            .flat_map(|(label, ids)| ids.iter().map(move |id| (id.clone(), label.clone())))
            .collect()
    }

    /// Serializes buffer contents (class -> exemplar id list) to JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.per_class).expect("buffer contents are serializable")
    }

    pub fn from_json(memory_size: usize, json: &str) -> Result<Self, serde_json::Error> {
        let per_class: BTreeMap<Label, Vec<ClipId>> = serde_json::from_str(json)?;
        Ok(Self {
            memory_size,
            per_class,
        })
    }

    /// Recomputes the per-class quota split after `seen_in_order` classes
    /// (all classes seen so far, in class order) and refreshes exemplars.
    ///
    /// Classes already stored are truncated to their quota, keeping the
    /// herding-order prefix. New classes are filled by herding over the
    /// features supplied by `candidates`: for each new class the callback
    /// returns the candidate clip ids and their unit-norm feature rows.
    pub fn rebuild<F>(
        &mut self,
        seen_in_order: &[Label],
        mut candidates: F,
    ) -> Result<(), MemoryError>
    where
        F: FnMut(&Label) -> Result<(Vec<ClipId>, Array2<f64>), MemoryError>,
    {
        if seen_in_order.is_empty() {
            return Ok(());
        }
        let quota = self.memory_size / seen_in_order.len();
        if quota == 0 {
            return Err(MemoryError::BudgetTooSmall {
                budget: self.memory_size,
                classes: seen_in_order.len(),
            });
        }
        let remainder = self.memory_size % seen_in_order.len();

        let mut next = BTreeMap::new();
        for (pos, label) in seen_in_order.iter().enumerate() {
            // The first `remainder` classes in class order get one extra slot.
            let slots = quota + usize::from(pos < remainder);
            let ids = match self.per_class.get(label) {
                Some(existing) => {
                    let mut kept = existing.clone();
                    kept.truncate(slots);
                    kept
                }
                None => {
                    let (ids, feats) = candidates(label)?;
                    if ids.len() != feats.nrows() {
                        return Err(MemoryError::FeatureCountMismatch {
                            rows: feats.nrows(),
                            candidates: ids.len(),
                        });
                    }
                    let take = slots.min(ids.len());
                    herding_select(feats.view(), take)?
                        .into_iter()
                        .map(|i| ids[i].clone())
                        .collect()
                }
            };
            next.insert(label.clone(), ids);
        }
        self.per_class = next;
        debug_assert!(self.len() <= self.memory_size);
        Ok(())
    }

    /// Unit-norm class means of the stored exemplars under `embed`, which
    /// maps a list of clip ids to unit-norm feature rows.
    pub fn class_means<F>(&self, mut embed: F) -> Result<BTreeMap<Label, Array1<f64>>, MemoryError>
    where
        F: FnMut(&[ClipId]) -> Array2<f64>,
    {
        let mut means = BTreeMap::new();
        for (label, ids) in &self.per_class {
            if ids.is_empty() {
                return Err(MemoryError::EmptyClass(label.clone()));
            }
            let feats = embed(ids);
            let mean = feats.mean_axis(ndarray::Axis(0)).expect("non-empty class");
            let norm = mean.dot(&mean).sqrt();
            if norm < 1e-12 {
                return Err(MemoryError::DegenerateMean(label.clone()));
            }
            means.insert(label.clone(), mean / norm);
        }
        Ok(means)
    }
}

/// Greedy herding over unit-norm feature rows.
///
/// Step `t` appends the candidate that brings the mean of the selected set
/// closest (Euclidean) to the full-set mean; ties break to the lowest index.
/// Returns indices in selection order.
pub fn herding_select(features: ArrayView2<f64>, m: usize) -> Result<Vec<usize>, MemoryError> {
    let n = features.nrows();
    if m > n {
        return Err(MemoryError::NotEnoughCandidates { m, n });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let target = features.mean_axis(ndarray::Axis(0)).expect("n > 0");

    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut running_sum = Array1::<f64>::zeros(features.ncols());
    for step in 1..=m {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if taken[j] {
                continue;
            }
            let mut dist = 0.0;
            for (k, t) in target.iter().enumerate() {
                let mean_k = (running_sum[k] + features[[j, k]]) / step as f64;
                let d = t - mean_k;
                dist += d * d;
            }
            // Strict less-than keeps the lowest index on ties.
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((j, dist));
            }
        }
        let (j, _) = best.expect("m <= n leaves a candidate");
        taken[j] = true;
        running_sum += &features.row(j);
        selected.push(j);
    }
    Ok(selected)
}

/// Nearest-class-mean prediction over unit-norm class means.
///
/// Returns the label with the smallest Euclidean distance to `embedding`;
/// ties break to the earliest label in `order`.
pub fn nearest_class_mean<'a>(
    embedding: ArrayView1<f64>,
    means: &'a BTreeMap<Label, Array1<f64>>,
    order: &[Label],
) -> Option<&'a Label> {
    let mut best: Option<(&Label, f64)> = None;
    for label in order {
        let Some((label, mean)) = means.get_key_value(label) else {
            continue;
        };
        let diff = &embedding.to_owned() - mean;
        let dist = diff.dot(&diff);
        if best.is_none_or(|(_, b)| dist < b) {
            best = Some((label, dist));
        }
    }
    best.map(|(l, _)| l)
}
