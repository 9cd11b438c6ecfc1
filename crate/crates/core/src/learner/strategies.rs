//! The incremental-learning strategies.
//!
//! Shared lifecycle plumbing lives in `ModelCore` and `sgd_train`; each
//! strategy supplies its per-batch loss/gradient and its finalization step.
//! Gradient-trained learners share momentum SGD over the model's flat
//! parameter vector, which is also what gradient projection and the Fisher
//! anchor operate on.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use super::losses::{cross_entropy_grad, ewc_penalty, ewc_penalty_grad, icarl_grad, pod_grad};
use super::{
    fisher_diagonal, gem_project, shuffled_batches, AcilState, Learner, LearnerError, LearnerSpec,
    TaskContext, TaskStats, LEARNER_REGISTRY, UNIMPLEMENTED_LEARNERS,
};
use crate::audio::FeatureStore;
use crate::memory::ReplayBuffer;
use crate::model::nn::Linear;
use crate::model::{
    build_backbone, fit_bias, BiasLayer, DerModel, IncrementalModel, ScMode, StochasticClassifier,
};
use crate::rng;
use crate::ClipId;

/// `(clip id, class position)` pairs of one data subset.
type SampleSet = Vec<(ClipId, usize)>;

pub(super) fn build(name: &str, spec: &LearnerSpec) -> Result<Box<dyn Learner>, LearnerError> {
    // Resolve the backbone once so bad convnet names fail at build time.
    build_backbone(
        spec.convnet_type,
        spec.hp.feature_dim,
        &mut rng::stream(0, "probe"),
    )?;
    let needs_buffer = |label: &'static str| -> Result<ReplayBuffer, LearnerError> {
        if spec.memory_size == 0 {
            return Err(LearnerError::NeedsBuffer(label));
        }
        Ok(ReplayBuffer::new(spec.memory_size))
    };
    match name {
        "finetune" => Ok(Box::new(Finetune {
            core: ModelCore::new(spec),
            momentum: spec.hp.momentum,
        })),
        "replay" => Ok(Box::new(Replay {
            core: ModelCore::new(spec),
            buffer: needs_buffer("replay")?,
            momentum: spec.hp.momentum,
        })),
        "ewc" => Ok(Box::new(Ewc {
            core: ModelCore::new(spec),
            momentum: spec.hp.momentum,
            lambda: spec.hp.ewc_lambda,
            fisher: None,
            theta_star: None,
        })),
        "lwf" => Ok(Box::new(Lwf {
            core: ModelCore::new(spec),
            momentum: spec.hp.momentum,
            temperature: spec.hp.kd_temperature,
            kd_weight: spec.hp.kd_weight,
            snapshot: None,
        })),
        "icarl" => Ok(Box::new(Icarl {
            core: ModelCore::new(spec),
            buffer: needs_buffer("icarl")?,
            momentum: spec.hp.momentum,
            temperature: spec.hp.kd_temperature,
            kd_weight: spec.hp.kd_weight,
            snapshot: None,
            means_by_position: Vec::new(),
        })),
        // Plain SGD: momentum would apply a mix of past gradients, voiding
        // the per-step constraint satisfaction the projection provides.
        "gem" => Ok(Box::new(Gem {
            core: ModelCore::new(spec),
            buffer: needs_buffer("gem")?,
            momentum: 0.0,
            margin: spec.hp.gem_margin,
        })),
        "bic" => Ok(Box::new(Bic {
            core: ModelCore::new(spec),
            buffer: needs_buffer("bic")?,
            momentum: spec.hp.momentum,
            temperature: spec.hp.kd_temperature,
            kd_weight: spec.hp.kd_weight,
            steps: spec.hp.bic_steps,
            lr: spec.hp.bic_lr,
            val_fraction: spec.hp.bic_val_fraction,
            snapshot: None,
            layers: Vec::new(),
        })),
        "wa" => Ok(Box::new(Wa {
            core: ModelCore::new(spec),
            buffer: needs_buffer("wa")?,
            momentum: spec.hp.momentum,
            temperature: spec.hp.kd_temperature,
            kd_weight: spec.hp.kd_weight,
            snapshot: None,
        })),
        "podnet" => Ok(Box::new(PodNet {
            core: ModelCore::new(spec),
            buffer: (spec.memory_size > 0).then(|| ReplayBuffer::new(spec.memory_size)),
            momentum: spec.hp.momentum,
            pod_weight: spec.hp.pod_weight,
            snapshot: None,
        })),
        "der" => Ok(Box::new(Der {
            convnet_type: spec.convnet_type.to_string(),
            feature_dim: spec.hp.feature_dim,
            seed: spec.seed,
            momentum: spec.hp.momentum,
            aux_weight: spec.hp.der_aux_weight,
            clone_branch: spec.hp.der_clone_branch,
            buffer: needs_buffer("der")?,
            model: None,
            next_task: 0,
        })),
        "acil" => Ok(Box::new(Acil {
            core: ModelCore::new(spec),
            momentum: spec.hp.momentum,
            gamma: spec.hp.acil_gamma,
            expansion: spec.hp.acil_expansion,
            state: None,
        })),
        "metasc" => Ok(Box::new(MetaSc {
            convnet_type: spec.convnet_type.to_string(),
            feature_dim: spec.hp.feature_dim,
            seed: spec.seed,
            momentum: spec.hp.momentum,
            scale: spec.hp.sc_scale,
            refine_steps: spec.hp.sc_refine_steps,
            refine_lr: spec.hp.sc_refine_lr,
            backbone: None,
            classifier: None,
            next_task: 0,
        })),
        other => Err(LearnerError::UnknownLearner {
            name: other.to_string(),
            known: LEARNER_REGISTRY.iter().map(|s| s.to_string()).collect(),
            unimplemented: UNIMPLEMENTED_LEARNERS
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }),
    }
}

// ---- shared plumbing ------------------------------------------------------

struct ModelCore {
    convnet_type: String,
    feature_dim: usize,
    seed: u64,
    model: Option<IncrementalModel>,
    next_task: usize,
}

impl ModelCore {
    fn new(spec: &LearnerSpec) -> Self {
        Self {
            convnet_type: spec.convnet_type.to_string(),
            feature_dim: spec.hp.feature_dim,
            seed: spec.seed,
            model: None,
            next_task: 0,
        }
    }

    /// Order check plus head capacity for the task's cumulative label space.
    fn begin_task(&mut self, ctx: &TaskContext) -> Result<(), LearnerError> {
        if ctx.task_index != self.next_task {
            return Err(LearnerError::TaskOrder {
                expected: self.next_task,
                got: ctx.task_index,
            });
        }
        if ctx.train.is_empty() {
            return Err(LearnerError::EmptyData("task training set"));
        }
        let want = ctx.schedule.classes_seen(ctx.task_index)?;
        match &mut self.model {
            None => {
                let mut backbone_rng = rng::stream(self.seed, "backbone-init");
                let backbone =
                    build_backbone(&self.convnet_type, self.feature_dim, &mut backbone_rng)?;
                let mut head_rng = rng::stream(self.seed, "head-init");
                self.model = Some(IncrementalModel::new(backbone, want, &mut head_rng));
            }
            Some(model) => {
                let have = model.n_classes_seen();
                if want > have {
                    let mut expand_rng =
                        rng::stream(self.seed, &format!("head-expand-{}", ctx.task_index));
                    model.expand_head(want - have, &mut expand_rng)?;
                }
            }
        }
        Ok(())
    }

    fn end_task(&mut self) {
        self.next_task += 1;
    }

    fn model(&self) -> &IncrementalModel {
        self.model.as_ref().expect("model built by begin_task")
    }

    fn logits_scores(
        &self,
        ids: &[&ClipId],
        store: &FeatureStore,
    ) -> Result<Array2<f64>, LearnerError> {
        let model = self.model();
        let mut out = Array2::zeros((ids.len(), model.n_classes_seen()));
        let mut row = 0;
        for chunk in ids.chunks(64) {
            let x = store.batch(chunk);
            let logits = model.forward(&x).logits;
            out.slice_mut(ndarray::s![row..row + chunk.len(), ..])
                .assign(&logits);
            row += chunk.len();
        }
        Ok(out)
    }
}

fn tensors_of(store: &FeatureStore, batch: &[(ClipId, usize)]) -> (Array4<f64>, Vec<usize>) {
    let ids: Vec<&ClipId> = batch.iter().map(|(id, _)| id).collect();
    let labels: Vec<usize> = batch.iter().map(|(_, pos)| *pos).collect();
    (store.batch(&ids), labels)
}

/// Momentum SGD over shuffled batches of `samples`; `batch_grad` maps a
/// batch to its loss and flat gradient. Aborts on the first non-finite loss.
fn sgd_train<F>(
    model: &mut IncrementalModel,
    samples: &[(ClipId, usize)],
    ctx: &TaskContext,
    seed: u64,
    name: &str,
    momentum: f64,
    mut batch_grad: F,
) -> Result<TaskStats, LearnerError>
where
    F: FnMut(
        &IncrementalModel,
        &[(ClipId, usize)],
        usize,
    ) -> Result<(f64, Array1<f64>), LearnerError>,
{
    let mut velocity: Option<Array1<f64>> = None;
    let mut total_loss = 0.0;
    let mut steps = 0usize;
    for epoch in 0..ctx.epochs {
        let mut batch_rng = rng::stream(
            seed,
            &format!("batches-{name}-t{}-e{epoch}", ctx.task_index),
        );
        for picks in shuffled_batches(samples.len(), ctx.batch_size, &mut batch_rng) {
            let batch: Vec<(ClipId, usize)> = picks.iter().map(|&i| samples[i].clone()).collect();
            let (loss, grad) = batch_grad(model, &batch, steps)?;
            if !loss.is_finite() {
                return Err(LearnerError::NonFiniteLoss {
                    task: ctx.task_index,
                    step: steps,
                });
            }
            let v = match velocity.take() {
                Some(mut v) => {
                    v *= momentum;
                    v += &grad;
                    v
                }
                None => grad,
            };
            let mut params = model.flat_params();
            params.scaled_add(-ctx.learning_rate, &v);
            model.set_flat_params(params.view());
            velocity = Some(v);
            total_loss += loss;
            steps += 1;
        }
    }
    Ok(TaskStats {
        mean_loss: if steps > 0 {
            total_loss / steps as f64
        } else {
            0.0
        },
        steps,
    })
}

/// Plain cross-entropy batch gradient.
fn ce_batch(
    model: &IncrementalModel,
    store: &FeatureStore,
    batch: &[(ClipId, usize)],
) -> Result<(f64, Array1<f64>), LearnerError> {
    let (x, labels) = tensors_of(store, batch);
    let out = model.forward(&x);
    let (loss, d_logits) = cross_entropy_grad(&out.logits, &labels)?;
    Ok((loss, model.backward(&x, &out, &d_logits, None)))
}

/// Cross-entropy plus distillation against a frozen snapshot's logits; any
/// stored bias layers covering old groups are applied to the targets.
fn kd_ce_batch(
    model: &IncrementalModel,
    snapshot: Option<&IncrementalModel>,
    bias_layers: &[BiasLayer],
    store: &FeatureStore,
    batch: &[(ClipId, usize)],
    temperature: f64,
    kd_weight: f64,
) -> Result<(f64, Array1<f64>), LearnerError> {
    let (x, labels) = tensors_of(store, batch);
    let out = model.forward(&x);
    let old_logits = snapshot.map(|snap| {
        let mut logits = snap.forward(&x).logits;
        for layer in bias_layers {
            if layer.end <= logits.ncols() {
                layer.apply(&mut logits);
            }
        }
        logits
    });
    let (loss, d_logits) = icarl_grad(
        &out.logits,
        &labels,
        old_logits.as_ref(),
        temperature,
        kd_weight,
    )?;
    Ok((loss, model.backward(&x, &out, &d_logits, None)))
}

/// Buffer contents as `(clip id, class position)` pairs.
fn buffer_samples(
    buffer: &ReplayBuffer,
    ctx: &TaskContext,
) -> Result<Vec<(ClipId, usize)>, LearnerError> {
    buffer
        .all_entries()
        .into_iter()
        .map(|(id, label)| {
            ctx.schedule
                .class_position(&label)
                .map(|pos| (id, pos))
                .ok_or_else(|| {
                    LearnerError::Shape(format!("buffer label {label:?} missing from schedule"))
                })
        })
        .collect()
}

/// Mixes a training batch with `draw` exemplars sampled uniformly (with
/// replacement) from the buffer entries. Empty buffers pass through.
pub fn replay_batch_mix(
    task_batch: &[(ClipId, usize)],
    buffer_entries: &[(ClipId, usize)],
    draw: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(ClipId, usize)> {
    let mut out = task_batch.to_vec();
    if buffer_entries.is_empty() {
        return out;
    }
    use rand::Rng;
    for _ in 0..draw {
        let pick = rng.random_range(0..buffer_entries.len());
        out.push(buffer_entries[pick].clone());
    }
    out
}

/// Rebuilds the buffer for all classes seen through `ctx.task_index`,
/// herding new classes over unit-norm features from `embed`.
fn rebuild_buffer_with<F>(
    buffer: &mut ReplayBuffer,
    ctx: &TaskContext,
    embed: F,
) -> Result<(), LearnerError>
where
    F: Fn(&[&ClipId]) -> Array2<f64>,
{
    let seen = ctx
        .schedule
        .cumulative_label_space(ctx.task_index)?
        .to_vec();
    buffer.rebuild(&seen, |label| {
        let pos = ctx
            .schedule
            .class_position(label)
            .expect("label from the schedule's own space");
        let ids: Vec<ClipId> = ctx
            .train
            .iter()
            .filter(|(_, p)| *p == pos)
            .map(|(id, _)| id.clone())
            .collect();
        let refs: Vec<&ClipId> = ids.iter().collect();
        let feats = if refs.is_empty() {
            Array2::zeros((0, 1))
        } else {
            embed(&refs)
        };
        Ok((ids, feats))
    })?;
    Ok(())
}

/// Scales new head rows so their mean L2 norm matches the old rows'.
/// Old rows and every bias stay bit-identical. Returns the scaling factor.
pub fn wa_align(head: &mut Linear, n_old: usize) -> Result<f64, LearnerError> {
    let n_total = head.out_dim();
    if n_old == 0 || n_old >= n_total {
        return Err(LearnerError::Shape(format!(
            "weight alignment needs both groups non-empty (old {n_old}, total {n_total})"
        )));
    }
    let row_norm = |row: ndarray::ArrayView1<f64>| row.dot(&row).sqrt();
    let mut old_mean = 0.0;
    for r in 0..n_old {
        old_mean += row_norm(head.weight.row(r));
    }
    old_mean /= n_old as f64;
    let mut new_mean = 0.0;
    for r in n_old..n_total {
        let norm = row_norm(head.weight.row(r));
        if norm == 0.0 {
            return Err(LearnerError::ZeroNormRow(r));
        }
        new_mean += norm;
    }
    new_mean /= (n_total - n_old) as f64;
    let gamma = old_mean / new_mean;
    for r in n_old..n_total {
        head.weight.row_mut(r).mapv_inplace(|v| v * gamma);
    }
    Ok(gamma)
}

fn unit_rows(mut e: Array2<f64>) -> Array2<f64> {
    for mut row in e.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 1e-12 {
            row /= norm;
        }
    }
    e
}

// ---- finetune -------------------------------------------------------------

struct Finetune {
    core: ModelCore,
    momentum: f64,
}

impl Learner for Finetune {
    fn name(&self) -> &'static str {
        "finetune"
    }

    fn run_task(&mut self, ctx: &TaskContext) -> Result<TaskStats, LearnerError> {
        self.core.begin_task(ctx)?;
        let model = self.core.model.as_mut().expect("built");
        let stats = sgd_train(
            model,
            ctx.train,
            ctx,
            self.core.seed,
            "finetune",
            self.momentum,
            |m, batch, _| ce_batch(m, ctx.store, batch),
        )?;
        self.core.end_task();
        Ok(stats)
    }

    fn scores(&self, ids: &[&ClipId], store: &FeatureStore) -> Result<Array2<f64>, LearnerError> {
        self.core.logits_scores(ids, store)
    }

    fn classes_seen(&self) -> usize {
        self.core.model().n_classes_seen()
    }
}

// ---- replay ----------------------------------------------------------------

struct Replay {
    core: ModelCore,
    buffer: ReplayBuffer,
    momentum: f64,
}

impl Learner for Replay {
    fn name(&self) -> &'static str {
        "replay"
    }

    fn run_task(&mut self, ctx: &TaskContext) -> Result<TaskStats, LearnerError> {
        self.core.begin_task(ctx)?;
        let entries = buffer_samples(&self.buffer, ctx)?;
        let seed = self.core.seed;
        let model = self.core.model.as_mut().expect("built");
        let stats = sgd_train(
            model,
            ctx.train,
            ctx,
            seed,
            "replay",
            self.momentum,
            |m, batch, step| {
                let mut draw_rng =
                    rng::stream(seed, &format!("replay-draw-t{}-s{step}", ctx.task_index));
                let mixed = replay_batch_mix(batch, &entries, batch.len(), &mut draw_rng);
                ce_batch(m, ctx.store, &mixed)
            },
        )?;
        let model = self.core.model.as_ref().expect("built");
        rebuild_buffer_with(&mut self.buffer, ctx, |ids| {
            model.embed_unit(&ctx.store.batch(ids))
        })?;
        self.core.end_task();
        Ok(stats)
    }

    fn scores(&self, ids: &[&ClipId], store: &FeatureStore) -> Result<Array2<f64>, LearnerError> {
        self.core.logits_scores(ids, store)
    }

    fn classes_seen(&self) -> usize {
        self.core.model().n_classes_seen()
    }

    fn buffer(&self) -> Option<&ReplayBuffer> {
        Some(&self.buffer)
    }
}

// ---- ewc -------------------------------------------------------------------

struct Ewc {
    core: ModelCore,
    momentum: f64,
    lambda: f64,
    fisher: Option<Array1<f64>>,
    theta_star: Option<Array1<f64>>,
}

impl Ewc {
    /// Re-indexes the anchor after a head expansion: backbone and old head
    /// rows keep their entries, fresh parameters anchor at zero importance.
    fn remap_anchor(&mut self, bb_len: usize, in_dim: usize, old_out: usize, new_out: usize) {
        let remap = |v: &Array1<f64>| -> Array1<f64> {
            let mut out = Array1::zeros(bb_len + new_out * in_dim + new_out);
            for i in 0..bb_len + old_out * in_dim {
                out[i] = v[i];
            }
            for i in 0..old_out {
                out[bb_len + new_out * in_dim + i] = v[bb_len + old_out * in_dim + i];
            }
            out
        };
        self.fisher = self.fisher.as_ref().map(remap);
        self.theta_star = self.theta_star.as_ref().map(remap);
    }
}

impl Learner for Ewc {
    fn name(&self) -> &'static str {
        "ewc"
    }

    fn run_task(&mut self, ctx: &TaskContext) -> Result<TaskStats, LearnerError> {
        let before = self
            .core
            .model
            .as_ref()
            .map(|m| (m.backbone.param_count(), m.head.in_dim(), m.head.out_dim()));
        self.core.begin_task(ctx)?;
        if let Some((bb_len, in_dim, old_out)) = before {
            let new_out = self.core.model().n_classes_seen();
            if new_out > old_out {
                self.remap_anchor(bb_len, in_dim, old_out, new_out);
            }
        }

        let Self {
            core,
            momentum,
            lambda,
            fisher,
            theta_star,
        } = self;
        let model = core.model.as_mut().expect("built");
        let stats = sgd_train(
            model,
            ctx.train,
            ctx,
            core.seed,
            "ewc",
            *momentum,
            |m, batch, _| {
                let (mut loss, mut grad) = ce_batch(m, ctx.store, batch)?;
                if let (Some(f), Some(star)) = (fisher.as_ref(), theta_star.as_ref()) {
                    let theta = m.flat_params();
                    loss += ewc_penalty(theta.view(), star.view(), f.view(), *lambda)?;
                    grad += &ewc_penalty_grad(theta.view(), star.view(), f.view(), *lambda)?;
                }
                Ok((loss, grad))
            },
        )?;

        // Fisher at the task optimum anchors the next task.
        let model = self.core.model.as_ref().expect("built");
        let (x, labels) = tensors_of(ctx.store, ctx.train);
        self.fisher = Some(fisher_diagonal(model, &x, &labels)?);
        self.theta_star = Some(model.flat_params());
        self.core.end_task();
        Ok(stats)
    }

    fn scores(&self, ids: &[&ClipId], store: &FeatureStore) -> Result<Array2<f64>, LearnerError> {
        self.core.logits_scores(ids, store)
    }

    fn classes_seen(&self) -> usize {
        self.core.model().n_classes_seen()
    }
}

// ---- lwf -------------------------------------------------------------------

struct Lwf {
    core: ModelCore,
    momentum: f64,
    temperature: f64,
    kd_weight: f64,
    snapshot: Option<IncrementalModel>,
}

impl Learner for Lwf {
    fn name(&self) -> &'static str {
        "lwf"
    }

    fn run_task(&mut self, ctx: &TaskContext) -> Result<TaskStats, LearnerError> {
        if ctx.task_index > 0 {
            self.snapshot = self.core.model.clone();
        }
        self.core.begin_task(ctx)?;
        let Self {
            core,
            momentum,
            temperature,
            kd_weight,
            snapshot,
        } = self;
        let model = core.model.as_mut().expect("built");
        let stats = sgd_train(
            model,
            ctx.train,
            ctx,
            core.seed,
            "lwf",
            *momentum,
            |m, batch, _| {
                kd_ce_batch(
                    m,
                    snapshot.as_ref(),
                    &[],
                    ctx.store,
                    batch,
                    *temperature,
                    *kd_weight,
                )
            },
        )?;
        self.core.end_task();
        Ok(stats)
    }

    fn scores(&self, ids: &[&ClipId], store: &FeatureStore) -> Result<Array2<f64>, LearnerError> {
        self.core.logits_scores(ids, store)
    }

    fn classes_seen(&self) -> usize {
        self.core.model().n_classes_seen()
    }
}

// ---- icarl -----------------------------------------------------------------

struct Icarl {
    core: ModelCore,
    buffer: ReplayBuffer,
    momentum: f64,
    temperature: f64,
    kd_weight: f64,
    snapshot: Option<IncrementalModel>,
    /// Unit-norm exemplar means indexed by class position, refreshed after
    /// every task with the current model.
    means_by_position: Vec<Array1<f64>>,
}

impl Learner for Icarl {
    fn name(&self) -> &'static str {
        "icarl"
    }

    fn run_task(&mut self, ctx: &TaskContext) -> Result<TaskStats, LearnerError> {
        if ctx.task_index > 0 {
            self.snapshot = self.core.model.clone();
        }
        self.core.begin_task(ctx)?;

        let mut union = ctx.train.to_vec();
        union.extend(buffer_samples(&self.buffer, ctx)?);

        let Self {
            core,
            momentum,
            temperature,
            kd_weight,
            snapshot,
            ..
        } = self;
        let model = core.model.as_mut().expect("built");
        let stats = sgd_train(
            model,
            &union,
            ctx,
            core.seed,
            "icarl",
            *momentum,
            |m, batch, _| {
                kd_ce_batch(
                    m,
                    snapshot.as_ref(),
                    &[],
                    ctx.store,
                    batch,
                    *temperature,
                    *kd_weight,
                )
            },
        )?;

        let model = self.core.model.as_ref().expect("built");
        rebuild_buffer_with(&mut self.buffer, ctx, |ids| {
            model.embed_unit(&ctx.store.batch(ids))
        })?;
        // Nearest-mean classification uses exemplar means under the current
        // model; recompute from scratch each task.
        let means = self.buffer.class_means(|ids| {
            let refs: Vec<&ClipId> = ids.iter().collect();
            model.embed_unit(&ctx.store.batch(&refs))
        })?;
        let mut by_position: Vec<(usize, Array1<f64>)> = means
            .into_iter()
            .map(|(label, mean)| {
                (
                    ctx.schedule
                        .class_position(&label)
                        .expect("buffer labels come from the schedule"),
                    mean,
                )
            })
            .collect();
        by_position.sort_by_key(|(pos, _)| *pos);
        self.means_by_position = by_position.into_iter().map(|(_, m)| m).collect();

        self.core.end_task();
        Ok(stats)
    }

    /// Negative squared distance to each class mean; argmax is the nearest
    /// mean, and the first-index tie rule favors the earliest class order
    /// position.
    fn scores(&self, ids: &[&ClipId], store: &FeatureStore) -> Result<Array2<f64>, LearnerError> {
        let model = self.core.model();
        let mut out = Array2::zeros((ids.len(), self.means_by_position.len()));
        let mut row = 0;
        for chunk in ids.chunks(64) {
            let embeddings = model.embed_unit(&store.batch(chunk));
            for b in 0..chunk.len() {
                let e = embeddings.row(b);
                for (c, mean) in self.means_by_position.iter().enumerate() {
                    let diff = &e.to_owned() - mean;
                    out[[row + b, c]] = -diff.dot(&diff);
                }
            }
            row += chunk.len();
        }
        Ok(out)
    }

    fn classes_seen(&self) -> usize {
        self.means_by_position.len()
    }

    fn buffer(&self) -> Option<&ReplayBuffer> {
        Some(&self.buffer)
    }
}

// ---- gem -------------------------------------------------------------------

struct Gem {
    core: ModelCore,
    buffer: ReplayBuffer,
    momentum: f64,
    margin: f64,
}

impl Learner for Gem {
    fn name(&self) -> &'static str {
        "gem"
    }

    fn run_task(&mut self, ctx: &TaskContext) -> Result<TaskStats, LearnerError> {
        self.core.begin_task(ctx)?;

        // Buffer exemplars grouped by the task that introduced their class;
        // one constraint gradient per past task at every step.
        let mut per_task: BTreeMap<usize, Vec<(ClipId, usize)>> = BTreeMap::new();
        for (id, pos) in buffer_samples(&self.buffer, ctx)? {
            let task = ctx
                .schedule
                .task_of_position(pos)
                .expect("position within schedule");
            per_task.entry(task).or_default().push((id, pos));
        }
        let memory_sets: Vec<Vec<(ClipId, usize)>> = per_task.into_values().collect();

        let margin = self.margin;
        let model = self.core.model.as_mut().expect("built");
        let stats = sgd_train(
            model,
            ctx.train,
            ctx,
            self.core.seed,
            "gem",
            self.momentum,
            |m, batch, _| {
                let (loss, grad) = ce_batch(m, ctx.store, batch)?;
                if memory_sets.is_empty() {
                    return Ok((loss, grad));
                }
                let memories = memory_sets
                    .iter()
                    .map(|samples| ce_batch(m, ctx.store, samples).map(|(_, g)| g))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok((loss, gem_project(&grad, &memories, margin)?))
            },
        )?;

        let model = self.core.model.as_ref().expect("built");
        rebuild_buffer_with(&mut self.buffer, ctx, |ids| {
            model.embed_unit(&ctx.store.batch(ids))
        })?;
        self.core.end_task();
        Ok(stats)
    }

    fn scores(&self, ids: &[&ClipId], store: &FeatureStore) -> Result<Array2<f64>, LearnerError> {
        self.core.logits_scores(ids, store)
    }

    fn classes_seen(&self) -> usize {
        self.core.model().n_classes_seen()
    }

    fn buffer(&self) -> Option<&ReplayBuffer> {
        Some(&self.buffer)
    }
}

// ---- bic -------------------------------------------------------------------

struct Bic {
    core: ModelCore,
    buffer: ReplayBuffer,
    momentum: f64,
    temperature: f64,
    kd_weight: f64,
    steps: usize,
    lr: f64,
    val_fraction: f64,
    snapshot: Option<IncrementalModel>,
    layers: Vec<BiasLayer>,
}

impl Bic {
    /// Stratified holdout: per class, `ceil(fraction * n)` samples go to the
    /// validation side (none if the class has a single sample and
    /// `force_one` is off).
    fn split(
        samples: &[(ClipId, usize)],
        fraction: f64,
        force_one: bool,
        seed: u64,
        stream: &str,
    ) -> (SampleSet, SampleSet) {
        let mut by_class: BTreeMap<usize, Vec<&(ClipId, usize)>> = BTreeMap::new();
        for s in samples {
            by_class.entry(s.1).or_default().push(s);
        }
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (pos, mut class_samples) in by_class {
            use rand::seq::SliceRandom;
            let mut class_rng = rng::stream(seed, &format!("{stream}-class{pos}"));
            class_samples.shuffle(&mut class_rng);
            let mut hold = (fraction * class_samples.len() as f64).ceil() as usize;
            if class_samples.len() < 2 && !force_one {
                hold = 0;
            }
            hold = hold.min(class_samples.len());
            for (i, s) in class_samples.into_iter().enumerate() {
                if i < hold {
                    val.push(s.clone());
                } else {
                    train.push(s.clone());
                }
            }
        }
        (train, val)
    }
}

impl Learner for Bic {
    fn name(&self) -> &'static str {
        "bic"
    }

    fn run_task(&mut self, ctx: &TaskContext) -> Result<TaskStats, LearnerError> {
        if ctx.task_index > 0 {
            self.snapshot = self.core.model.clone();
        }
        self.core.begin_task(ctx)?;
        let n_old = self
            .snapshot
            .as_ref()
            .map_or(0, IncrementalModel::n_classes_seen);

        let (new_train, new_val) = Self::split(
            ctx.train,
            self.val_fraction,
            false,
            self.core.seed,
            &format!("bic-new-t{}", ctx.task_index),
        );
        let exemplars = buffer_samples(&self.buffer, ctx)?;
        let (old_train, old_val) = Self::split(
            &exemplars,
            self.val_fraction,
            true,
            self.core.seed,
            &format!("bic-old-t{}", ctx.task_index),
        );
        let mut union = new_train;
        union.extend(old_train);

        let Self {
            core,
            momentum,
            temperature,
            kd_weight,
            snapshot,
            layers,
            ..
        } = self;
        let model = core.model.as_mut().expect("built");
        let stats = sgd_train(
            model,
            &union,
            ctx,
            core.seed,
            "bic",
            *momentum,
            |m, batch, _| {
                kd_ce_batch(
                    m,
                    snapshot.as_ref(),
                    layers,
                    ctx.store,
                    batch,
                    *temperature,
                    *kd_weight,
                )
            },
        )?;

        if ctx.task_index > 0 {
            if new_val.is_empty() || old_val.is_empty() {
                return Err(LearnerError::EmptyData(
                    "bias calibration needs both old and new validation samples",
                ));
            }
            let mut val = old_val;
            val.extend(new_val);
            let model = self.core.model.as_ref().expect("built");
            let (x, labels) = tensors_of(ctx.store, &val);
            let mut logits = model.forward(&x).logits;
            for layer in &self.layers {
                layer.apply(&mut logits);
            }
            let n_total = model.n_classes_seen();
            let layer = fit_bias(&logits, &labels, n_old, n_total, self.steps, self.lr);
            self.layers.push(layer);
        }

        let model = self.core.model.as_ref().expect("built");
        rebuild_buffer_with(&mut self.buffer, ctx, |ids| {
            model.embed_unit(&ctx.store.batch(ids))
        })?;
        self.core.end_task();
        Ok(stats)
    }

    fn scores(&self, ids: &[&ClipId], store: &FeatureStore) -> Result<Array2<f64>, LearnerError> {
        let mut logits = self.core.logits_scores(ids, store)?;
        for layer in &self.layers {
            layer.apply(&mut logits);
        }
        Ok(logits)
    }

    fn classes_seen(&self) -> usize {
        self.core.model().n_classes_seen()
    }

    fn buffer(&self) -> Option<&ReplayBuffer> {
        Some(&self.buffer)
    }
}

// ---- wa --------------------------------------------------------------------

struct Wa {
    core: ModelCore,
    buffer: ReplayBuffer,
    momentum: f64,
    temperature: f64,
    kd_weight: f64,
    snapshot: Option<IncrementalModel>,
}

impl Learner for Wa {
    fn name(&self) -> &'static str {
        "wa"
    }

    fn run_task(&mut self, ctx: &TaskContext) -> Result<TaskStats, LearnerError> {
        if ctx.task_index > 0 {
            self.snapshot = self.core.model.clone();
        }
        self.core.begin_task(ctx)?;
        let n_old = self
            .snapshot
            .as_ref()
            .map_or(0, IncrementalModel::n_classes_seen);

        let mut union = ctx.train.to_vec();
        union.extend(buffer_samples(&self.buffer, ctx)?);

        let Self {
            core,
            momentum,
            temperature,
            kd_weight,
            snapshot,
            ..
        } = self;
        let model = core.model.as_mut().expect("built");
        let stats = sgd_train(
            model,
            &union,
            ctx,
            core.seed,
            "wa",
            *momentum,
            |m, batch, _| {
                kd_ce_batch(
                    m,
                    snapshot.as_ref(),
                    &[],
                    ctx.store,
                    batch,
                    *temperature,
                    *kd_weight,
                )
            },
        )?;

        if ctx.task_index > 0 {
            let model = self.core.model.as_mut().expect("built");
            wa_align(&mut model.head, n_old)?;
        }
        let model = self.core.model.as_ref().expect("built");
        rebuild_buffer_with(&mut self.buffer, ctx, |ids| {
            model.embed_unit(&ctx.store.batch(ids))
        })?;
        self.core.end_task();
        Ok(stats)
    }

    fn scores(&self, ids: &[&ClipId], store: &FeatureStore) -> Result<Array2<f64>, LearnerError> {
        self.core.logits_scores(ids, store)
    }

    fn classes_seen(&self) -> usize {
        self.core.model().n_classes_seen()
    }

    fn buffer(&self) -> Option<&ReplayBuffer> {
        Some(&self.buffer)
    }
}

// ---- podnet ----------------------------------------------------------------

struct PodNet {
    core: ModelCore,
    buffer: Option<ReplayBuffer>,
    momentum: f64,
    pod_weight: f64,
    snapshot: Option<IncrementalModel>,
}

impl Learner for PodNet {
    fn name(&self) -> &'static str {
        "podnet"
    }

    fn run_task(&mut self, ctx: &TaskContext) -> Result<TaskStats, LearnerError> {
        if ctx.task_index > 0 {
            self.snapshot = self.core.model.clone();
        }
        self.core.begin_task(ctx)?;

        let mut union = ctx.train.to_vec();
        if let Some(buffer) = &self.buffer {
            union.extend(buffer_samples(buffer, ctx)?);
        }

        let Self {
            core,
            momentum,
            pod_weight,
            snapshot,
            ..
        } = self;
        let model = core.model.as_mut().expect("built");
        let stats = sgd_train(
            model,
            &union,
            ctx,
            core.seed,
            "podnet",
            *momentum,
            |m, batch, _| {
                let (x, labels) = tensors_of(ctx.store, batch);
                let out = m.forward(&x);
                let (mut loss, d_logits) = cross_entropy_grad(&out.logits, &labels)?;
                let map_grads = match snapshot.as_ref() {
                    None => None,
                    Some(snap) => {
                        let frozen = snap.forward(&x);
                        let (pod, grads) = pod_grad(&frozen.acts.maps, &out.acts.maps)?;
                        loss += *pod_weight * pod;
                        Some(
                            grads
                                .into_iter()
                                .map(|g| g * *pod_weight)
                                .collect::<Vec<_>>(),
                        )
                    }
                };
                Ok((loss, m.backward(&x, &out, &d_logits, map_grads.as_deref())))
            },
        )?;

        let model = self.core.model.as_ref().expect("built");
        if let Some(buffer) = &mut self.buffer {
            rebuild_buffer_with(buffer, ctx, |ids| model.embed_unit(&ctx.store.batch(ids)))?;
        }
        self.core.end_task();
        Ok(stats)
    }

    fn scores(&self, ids: &[&ClipId], store: &FeatureStore) -> Result<Array2<f64>, LearnerError> {
        self.core.logits_scores(ids, store)
    }

    fn classes_seen(&self) -> usize {
        self.core.model().n_classes_seen()
    }

    fn buffer(&self) -> Option<&ReplayBuffer> {
        self.buffer.as_ref()
    }
}

// ---- der -------------------------------------------------------------------

struct Der {
    convnet_type: String,
    feature_dim: usize,
    seed: u64,
    momentum: f64,
    aux_weight: f64,
    clone_branch: bool,
    buffer: ReplayBuffer,
    model: Option<DerModel>,
    next_task: usize,
}

impl Learner for Der {
    fn name(&self) -> &'static str {
        "der"
    }

    fn run_task(&mut self, ctx: &TaskContext) -> Result<TaskStats, LearnerError> {
        if ctx.task_index != self.next_task {
            return Err(LearnerError::TaskOrder {
                expected: self.next_task,
                got: ctx.task_index,
            });
        }
        if ctx.train.is_empty() {
            return Err(LearnerError::EmptyData("task training set"));
        }
        let classes_now = ctx.schedule.classes_seen(ctx.task_index)?;
        let n_old = if ctx.task_index == 0 {
            0
        } else {
            ctx.schedule.classes_seen(ctx.task_index - 1)?
        };

        let convnet = self.convnet_type.clone();
        let feature_dim = self.feature_dim;
        match &mut self.model {
            None => {
                let mut branch_rng = rng::stream(self.seed, "der-branch-0");
                let branch = build_backbone(&convnet, feature_dim, &mut branch_rng)?;
                let mut head_rng = rng::stream(self.seed, "der-head-0");
                self.model = Some(DerModel::new(branch, classes_now, &mut head_rng));
            }
            Some(model) => {
                let mut expand_rng =
                    rng::stream(self.seed, &format!("der-expand-{}", ctx.task_index));
                model.expand(
                    classes_now - n_old,
                    self.clone_branch,
                    |r| build_backbone(&convnet, feature_dim, r).expect("validated at build"),
                    &mut expand_rng,
                )?;
            }
        }

        let mut union = ctx.train.to_vec();
        union.extend(buffer_samples(&self.buffer, ctx)?);

        let model = self.model.as_mut().expect("built");
        let aux_weight = self.aux_weight;
        let mut velocity: Option<Array1<f64>> = None;
        let mut total_loss = 0.0;
        let mut steps = 0usize;
        for epoch in 0..ctx.epochs {
            let mut batch_rng = rng::stream(
                self.seed,
                &format!("batches-der-t{}-e{epoch}", ctx.task_index),
            );
            for picks in shuffled_batches(union.len(), ctx.batch_size, &mut batch_rng) {
                let batch: Vec<(ClipId, usize)> = picks.iter().map(|&i| union[i].clone()).collect();
                let (x, labels) = tensors_of(ctx.store, &batch);
                let out = model.forward(&x);
                let (mut loss, d_logits) = cross_entropy_grad(&out.logits, &labels)?;
                let d_aux = match &out.aux_logits {
                    None => None,
                    Some(aux_logits) => {
                        // Aux target: 0 lumps every old class, 1.. index the
                        // task's new classes.
                        let aux_labels: Vec<usize> = labels
                            .iter()
                            .map(|&p| if p < n_old { 0 } else { p - n_old + 1 })
                            .collect();
                        let (aux_loss, d) = cross_entropy_grad(aux_logits, &aux_labels)?;
                        loss += aux_weight * aux_loss;
                        Some(d * aux_weight)
                    }
                };
                if !loss.is_finite() {
                    return Err(LearnerError::NonFiniteLoss {
                        task: ctx.task_index,
                        step: steps,
                    });
                }
                let grad = model.backward(&x, &out, &d_logits, d_aux.as_ref());
                let v = match velocity.take() {
                    Some(mut v) => {
                        v *= self.momentum;
                        v += &grad;
                        v
                    }
                    None => grad,
                };
                let mut params = model.flat_params();
                params.scaled_add(-ctx.learning_rate, &v);
                model.set_flat_params(params.view());
                velocity = Some(v);
                total_loss += loss;
                steps += 1;
            }
        }

        let model = self.model.as_ref().expect("built");
        rebuild_buffer_with(&mut self.buffer, ctx, |ids| {
            unit_rows(model.forward(&ctx.store.batch(ids)).embeddings)
        })?;
        self.next_task += 1;
        Ok(TaskStats {
            mean_loss: if steps > 0 {
                total_loss / steps as f64
            } else {
                0.0
            },
            steps,
        })
    }

    fn scores(&self, ids: &[&ClipId], store: &FeatureStore) -> Result<Array2<f64>, LearnerError> {
        let model = self.model.as_ref().expect("trained");
        let mut out = Array2::zeros((ids.len(), model.n_classes_seen()));
        let mut row = 0;
        for chunk in ids.chunks(64) {
            let logits = model.forward(&store.batch(chunk)).logits;
            out.slice_mut(ndarray::s![row..row + chunk.len(), ..])
                .assign(&logits);
            row += chunk.len();
        }
        Ok(out)
    }

    fn classes_seen(&self) -> usize {
        self.model.as_ref().map_or(0, DerModel::n_classes_seen)
    }

    fn buffer(&self) -> Option<&ReplayBuffer> {
        Some(&self.buffer)
    }
}

// ---- acil ------------------------------------------------------------------

struct Acil {
    core: ModelCore,
    momentum: f64,
    gamma: f64,
    expansion: usize,
    state: Option<AcilState>,
}

impl Acil {
    fn feed(&mut self, ctx: &TaskContext) -> Result<(), LearnerError> {
        let model = self.core.model.as_ref().expect("built");
        let state = self.state.as_mut().expect("initialized");
        for chunk in ctx.train.chunks(128) {
            let (x, labels) = tensors_of(ctx.store, chunk);
            let embeddings = model.embed(&x);
            state.update(&embeddings, &labels)?;
        }
        Ok(())
    }
}

impl Learner for Acil {
    fn name(&self) -> &'static str {
        "acil"
    }

    fn run_task(&mut self, ctx: &TaskContext) -> Result<TaskStats, LearnerError> {
        self.core.begin_task(ctx)?;
        let classes_now = ctx.schedule.classes_seen(ctx.task_index)?;

        if ctx.task_index == 0 {
            // Base task: conventional backbone training, then freeze and
            // refit the analytic classifier on the same data.
            let model = self.core.model.as_mut().expect("built");
            let stats = sgd_train(
                model,
                ctx.train,
                ctx,
                self.core.seed,
                "acil",
                self.momentum,
                |m, batch, _| ce_batch(m, ctx.store, batch),
            )?;
            let feature_dim = self.core.model().feature_dim();
            let mut state =
                AcilState::new(feature_dim, self.expansion, self.gamma, self.core.seed)?;
            state.expand_classes(classes_now);
            self.state = Some(state);
            self.feed(ctx)?;
            self.core.end_task();
            Ok(stats)
        } else {
            // Incremental tasks touch only the analytic classifier.
            let state = self.state.as_mut().expect("base task ran first");
            state.expand_classes(classes_now - state.n_classes());
            self.feed(ctx)?;
            self.core.end_task();
            Ok(TaskStats {
                mean_loss: 0.0,
                steps: 0,
            })
        }
    }

    fn scores(&self, ids: &[&ClipId], store: &FeatureStore) -> Result<Array2<f64>, LearnerError> {
        let model = self.core.model();
        let state = self.state.as_ref().expect("trained");
        let mut out = Array2::zeros((ids.len(), state.n_classes()));
        let mut row = 0;
        for chunk in ids.chunks(64) {
            let embeddings = model.embed(&store.batch(chunk));
            let scores = state.scores(&embeddings)?;
            out.slice_mut(ndarray::s![row..row + chunk.len(), ..])
                .assign(&scores);
            row += chunk.len();
        }
        Ok(out)
    }

    fn classes_seen(&self) -> usize {
        self.state.as_ref().map_or(0, AcilState::n_classes)
    }

    fn frozen_backbone_params(&self) -> Option<Array1<f64>> {
        // Frozen once the base task's analytic state exists.
        self.state.as_ref().map(|_| self.core.model().flat_params())
    }
}

// ---- metasc ----------------------------------------------------------------

struct MetaSc {
    convnet_type: String,
    feature_dim: usize,
    seed: u64,
    momentum: f64,
    scale: f64,
    refine_steps: usize,
    refine_lr: f64,
    backbone: Option<Box<dyn crate::model::Backbone>>,
    classifier: Option<StochasticClassifier>,
    next_task: usize,
}

impl MetaSc {
    fn check_session(&self, ctx: &TaskContext, n_old: usize) -> Result<(), LearnerError> {
        let spec = ctx.schedule.spec();
        if !spec.few_shot {
            return Ok(());
        }
        let n_way = spec.n_way.unwrap_or(spec.increment);
        let k_shot = spec.k_shot.unwrap_or(1);
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for (_, pos) in ctx.train {
            if *pos < n_old {
                return Err(LearnerError::Shape(format!(
                    "few-shot session contains old-class position {pos}"
                )));
            }
            *counts.entry(*pos).or_default() += 1;
        }
        if counts.len() != n_way || counts.values().any(|&c| c != k_shot) {
            return Err(LearnerError::Shape(format!(
                "session must be {n_way}-way {k_shot}-shot, got {} classes with counts {:?}",
                counts.len(),
                counts.values().collect::<Vec<_>>()
            )));
        }
        Ok(())
    }
}

impl Learner for MetaSc {
    fn name(&self) -> &'static str {
        "metasc"
    }

    fn run_task(&mut self, ctx: &TaskContext) -> Result<TaskStats, LearnerError> {
        if ctx.task_index != self.next_task {
            return Err(LearnerError::TaskOrder {
                expected: self.next_task,
                got: ctx.task_index,
            });
        }
        if ctx.train.is_empty() {
            return Err(LearnerError::EmptyData("task training set"));
        }
        let classes_now = ctx.schedule.classes_seen(ctx.task_index)?;

        if ctx.task_index == 0 {
            // Base session: train backbone and stochastic classifier jointly
            // with sampled weights.
            let mut backbone_rng = rng::stream(self.seed, "metasc-backbone");
            let mut backbone =
                build_backbone(&self.convnet_type, self.feature_dim, &mut backbone_rng)?;
            let mut sc_rng = rng::stream(self.seed, "metasc-classifier");
            let mut sc =
                StochasticClassifier::new(classes_now, self.feature_dim, self.scale, &mut sc_rng);

            let mut velocity: Option<Array1<f64>> = None;
            let mut sample_rng = rng::stream(self.seed, "metasc-sampling");
            let mut total_loss = 0.0;
            let mut steps = 0usize;
            for epoch in 0..ctx.epochs {
                let mut batch_rng = rng::stream(self.seed, &format!("batches-metasc-t0-e{epoch}"));
                for picks in shuffled_batches(ctx.train.len(), ctx.batch_size, &mut batch_rng) {
                    let batch: Vec<(ClipId, usize)> =
                        picks.iter().map(|&i| ctx.train[i].clone()).collect();
                    let (x, labels) = tensors_of(ctx.store, &batch);
                    let acts = backbone.forward(&x);
                    let cache = sc.forward_train(&acts.embeddings, &mut sample_rng)?;
                    let (loss, d_logits) = cross_entropy_grad(&cache.logits, &labels)?;
                    if !loss.is_finite() {
                        return Err(LearnerError::NonFiniteLoss {
                            task: 0,
                            step: steps,
                        });
                    }
                    let (d_mean, d_log_var, d_emb) =
                        sc.backward(&acts.embeddings, &cache, &d_logits);
                    let bb_grad = backbone.backward(&x, &acts, &d_emb, None);

                    // One flat momentum buffer over backbone and classifier.
                    let mut grad =
                        Vec::with_capacity(bb_grad.len() + d_mean.len() + d_log_var.len());
                    grad.extend(bb_grad.iter());
                    grad.extend(d_mean.iter());
                    grad.extend(d_log_var.iter());
                    let grad = Array1::from_vec(grad);
                    let v = match velocity.take() {
                        Some(mut v) => {
                            v *= self.momentum;
                            v += &grad;
                            v
                        }
                        None => grad,
                    };
                    let bb_len = bb_grad.len();
                    let mut params = backbone.flat_params();
                    params.scaled_add(-ctx.learning_rate, &v.slice(ndarray::s![..bb_len]));
                    backbone.set_flat_params(params.view());
                    let mean_len = d_mean.len();
                    for (i, w) in sc.weight_mean.iter_mut().enumerate() {
                        *w -= ctx.learning_rate * v[bb_len + i];
                    }
                    for (i, w) in sc.weight_log_var.iter_mut().enumerate() {
                        *w -= ctx.learning_rate * v[bb_len + mean_len + i];
                    }
                    velocity = Some(v);
                    total_loss += loss;
                    steps += 1;
                }
            }
            self.backbone = Some(backbone);
            self.classifier = Some(sc);
            self.next_task = 1;
            return Ok(TaskStats {
                mean_loss: if steps > 0 {
                    total_loss / steps as f64
                } else {
                    0.0
                },
                steps,
            });
        }

        // Few-shot session: the backbone is frozen; imprint then refine only
        // the new class rows.
        let n_old = ctx.schedule.classes_seen(ctx.task_index - 1)?;
        self.check_session(ctx, n_old)?;
        let backbone = self.backbone.as_ref().expect("base session ran first");
        let sc = self.classifier.as_mut().expect("base session ran first");
        let mut expand_rng = rng::stream(self.seed, &format!("metasc-expand-{}", ctx.task_index));
        sc.expand(classes_now - n_old, &mut expand_rng)?;

        let mut by_class: BTreeMap<usize, Vec<&ClipId>> = BTreeMap::new();
        for (id, pos) in ctx.train {
            by_class.entry(*pos).or_default().push(id);
        }
        for (pos, ids) in &by_class {
            let x = ctx.store.batch(ids);
            let embeddings = unit_rows(backbone.forward(&x).embeddings);
            let mean = embeddings.mean_axis(Axis(0)).expect("non-empty class");
            sc.imprint(*pos, &mean);
        }

        let (x, labels) = tensors_of(ctx.store, ctx.train);
        let embeddings = backbone.forward(&x).embeddings;
        let mut refine_rng = rng::stream(self.seed, &format!("metasc-refine-{}", ctx.task_index));
        let mut total_loss = 0.0;
        for _ in 0..self.refine_steps {
            let cache = sc.forward_train(&embeddings, &mut refine_rng)?;
            let (loss, d_logits) = cross_entropy_grad(&cache.logits, &labels)?;
            if !loss.is_finite() {
                return Err(LearnerError::NonFiniteLoss {
                    task: ctx.task_index,
                    step: 0,
                });
            }
            let (mut d_mean, mut d_log_var, _) = sc.backward(&embeddings, &cache, &d_logits);
            // Old class parameters stay untouched.
            for r in 0..n_old {
                d_mean.row_mut(r).fill(0.0);
                d_log_var.row_mut(r).fill(0.0);
            }
            sc.weight_mean.scaled_add(-self.refine_lr, &d_mean);
            sc.weight_log_var.scaled_add(-self.refine_lr, &d_log_var);
            total_loss += loss;
        }

        self.next_task += 1;
        Ok(TaskStats {
            mean_loss: if self.refine_steps > 0 {
                total_loss / self.refine_steps as f64
            } else {
                0.0
            },
            steps: self.refine_steps,
        })
    }

    fn scores(&self, ids: &[&ClipId], store: &FeatureStore) -> Result<Array2<f64>, LearnerError> {
        let backbone = self.backbone.as_ref().expect("trained");
        let sc = self.classifier.as_ref().expect("trained");
        let mut out = Array2::zeros((ids.len(), sc.n_classes()));
        let mut row = 0;
        for chunk in ids.chunks(64) {
            let embeddings = backbone.forward(&store.batch(chunk)).embeddings;
            let logits = sc.logits(&embeddings, ScMode::Mean, None)?;
            out.slice_mut(ndarray::s![row..row + chunk.len(), ..])
                .assign(&logits);
            row += chunk.len();
        }
        Ok(out)
    }

    fn classes_seen(&self) -> usize {
        self.classifier
            .as_ref()
            .map_or(0, StochasticClassifier::n_classes)
    }

    fn frozen_backbone_params(&self) -> Option<Array1<f64>> {
        self.backbone.as_ref().map(|b| b.flat_params())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::HyperParams;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn unknown_learner_error_lists_both_sets() {
        let hp = HyperParams::default();
        let spec = LearnerSpec {
            convnet_type: "tiny-cnn",
            memory_size: 10,
            seed: 1,
            hp: &hp,
        };
        let err = build("coil", &spec).map(|_| ()).unwrap_err();
        match err {
            LearnerError::UnknownLearner {
                name,
                known,
                unimplemented,
            } => {
                assert_eq!(name, "coil");
                assert_eq!(known.len(), 12);
                assert_eq!(unimplemented, vec!["coil", "pan", "amfo"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn replay_without_memory_is_a_build_error() {
        let hp = HyperParams::default();
        let spec = LearnerSpec {
            convnet_type: "tiny-cnn",
            memory_size: 0,
            seed: 1,
            hp: &hp,
        };
        for name in ["replay", "icarl", "gem", "bic", "wa", "der"] {
            let err = build(name, &spec).map(|_| ()).unwrap_err();
            assert!(
                matches!(err, LearnerError::NeedsBuffer(_)),
                "{name} must demand a buffer"
            );
        }
        // Buffer-free learners build fine with memory_size = 0.
        for name in ["finetune", "ewc", "lwf", "podnet", "acil", "metasc"] {
            assert!(build(name, &spec).is_ok(), "{name} should build");
        }
    }

    #[test]
    fn replay_mix_passes_through_without_buffer() {
        let batch = vec![("a".to_string(), 0usize), ("b".to_string(), 1)];
        let mut r = rng::stream(1, "mix");
        let mixed = replay_batch_mix(&batch, &[], 4, &mut r);
        assert_eq!(mixed, batch);
    }

    #[test]
    fn replay_mix_draws_are_seeded() {
        let batch = vec![("a".to_string(), 0usize)];
        let entries: Vec<(ClipId, usize)> = (0..5).map(|i| (format!("old-{i}"), i)).collect();
        let mut r1 = rng::stream(9, "mix");
        let mut r2 = rng::stream(9, "mix");
        let m1 = replay_batch_mix(&batch, &entries, 6, &mut r1);
        let m2 = replay_batch_mix(&batch, &entries, 6, &mut r2);
        assert_eq!(m1, m2);
        assert_eq!(m1.len(), 7);
        assert!(m1[1..].iter().all(|(id, _)| id.starts_with("old-")));
    }

    #[test]
    fn wa_align_hand_cases() {
        let mut r = rng::stream(3, "wa");
        let mut head = Linear::new(2, 4, &mut r);
        head.weight = array![[3.0, 4.0], [0.0, 5.0], [6.0, 8.0], [0.0, 10.0]];
        let bias_before = head.bias.clone();
        // Old mean norm = 5, new mean norm = 10: gamma must be 0.5.
        let gamma = wa_align(&mut head, 2).unwrap();
        assert!((gamma - 0.5).abs() < 1e-12);
        assert_eq!(head.weight.row(0), array![3.0, 4.0].view());
        assert_eq!(head.weight.row(2), array![3.0, 4.0].view());
        assert_eq!(head.bias, bias_before);

        // Already equal norms: gamma = 1 and weights unchanged.
        let mut head2 = Linear::new(2, 2, &mut r);
        head2.weight = array![[1.0, 0.0], [0.0, 1.0]];
        let before = head2.weight.clone();
        let gamma = wa_align(&mut head2, 1).unwrap();
        assert!((gamma - 1.0).abs() < 1e-12);
        assert_eq!(head2.weight, before);
    }

    #[test]
    fn wa_align_rejects_zero_norm_new_row() {
        let mut r = rng::stream(5, "wa");
        let mut head = Linear::new(2, 2, &mut r);
        head.weight = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(matches!(
            wa_align(&mut head, 1),
            Err(LearnerError::ZeroNormRow(1))
        ));
    }

    #[test]
    fn wa_align_requires_both_groups() {
        let mut r = rng::stream(7, "wa");
        let mut head = Linear::new(2, 3, &mut r);
        assert!(wa_align(&mut head, 0).is_err());
        assert!(wa_align(&mut head, 3).is_err());
    }
}
