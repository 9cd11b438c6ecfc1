//! Backbones, the expandable incremental model, and classifier add-ons.
//!
//! An [`IncrementalModel`] is a backbone feature extractor plus a linear head
//! whose output width grows as tasks introduce classes; expansion copies old
//! head rows bit-exact so earlier logits are unchanged by construction.

mod backbones;
mod bias;
mod checkpoint;
mod der;
pub mod nn;
mod stochastic;

pub use backbones::{FlatLinear, MiniResNet, TinyCnn};
pub use bias::{fit_bias, BiasLayer};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use der::{DerModel, DerOut};
pub use stochastic::{ScMode, StochasticClassifier, LOG_VAR_FLOOR};

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView1};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use nn::Linear;

/// Backbone registry keys accepted by configs.
pub const CONVNET_REGISTRY: &[&str] = &["tiny-cnn", "mini-resnet"];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown convnet_type {name:?}; registered backbones: {known:?}")]
    UnknownBackbone { name: String, known: Vec<String> },
    #[error("head expansion by zero classes is a caller bug")]
    ZeroExpansion,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("checkpoint I/O: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
}

/// Activations captured by a backbone forward pass.
pub struct BackboneActs {
    /// `(batch, feature_dim)` penultimate-layer embeddings.
    pub embeddings: Array2<f64>,
    /// Post-activation block outputs; distillation losses attach here.
    pub maps: Vec<Array4<f64>>,
    /// Internal activations kept for backward only.
    pub aux: Vec<Array4<f64>>,
}

/// A feature extractor with explicit backward and flat-parameter access.
pub trait Backbone: Send {
    fn feature_dim(&self) -> usize;
    fn param_count(&self) -> usize;
    fn forward(&self, x: &Array4<f64>) -> BackboneActs;
    /// Flat parameter gradients, aligned with [`Backbone::flat_params`].
    /// `map_grads` adds gradient flowing directly into each entry of
    /// [`BackboneActs::maps`].
    fn backward(
        &self,
        x: &Array4<f64>,
        acts: &BackboneActs,
        grad_embeddings: &Array2<f64>,
        map_grads: Option<&[Array4<f64>]>,
    ) -> Array1<f64>;
    fn flat_params(&self) -> Array1<f64>;
    fn set_flat_params(&mut self, params: ArrayView1<f64>);
    fn named_params(&self) -> Vec<(String, ArrayD<f64>)>;
    fn clone_box(&self) -> Box<dyn Backbone>;
}

impl Clone for Box<dyn Backbone> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Builds a registered backbone with seeded initialization.
pub fn build_backbone(
    convnet_type: &str,
    feature_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Box<dyn Backbone>, ModelError> {
    match convnet_type {
        "tiny-cnn" => Ok(Box::new(TinyCnn::new(feature_dim, rng))),
        "mini-resnet" => Ok(Box::new(MiniResNet::new(feature_dim, rng))),
        other => Err(ModelError::UnknownBackbone {
            name: other.into(),
            known: CONVNET_REGISTRY.iter().map(|s| s.to_string()).collect(),
        }),
    }
}

/// Forward-pass record of an [`IncrementalModel`].
pub struct ModelOut {
    pub acts: BackboneActs,
    pub logits: Array2<f64>,
}

/// Backbone + expandable classification head.
#[derive(Clone)]
pub struct IncrementalModel {
    pub backbone: Box<dyn Backbone>,
    pub head: Linear,
}

impl IncrementalModel {
    pub fn new(backbone: Box<dyn Backbone>, n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let head = Linear::new(backbone.feature_dim(), n_classes, rng);
        Self { backbone, head }
    }

    pub fn n_classes_seen(&self) -> usize {
        self.head.out_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    pub fn forward(&self, x: &Array4<f64>) -> ModelOut {
        let acts = self.backbone.forward(x);
        let logits = self.head.forward(&acts.embeddings);
        ModelOut { acts, logits }
    }

    /// Embeddings only (no head).
    pub fn embed(&self, x: &Array4<f64>) -> Array2<f64> {
        self.backbone.forward(x).embeddings
    }

    /// Row-normalized embeddings for herding and nearest-mean classification.
    pub fn embed_unit(&self, x: &Array4<f64>) -> Array2<f64> {
        let mut e = self.embed(x);
        for mut row in e.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row /= norm;
            }
        }
        e
    }

    /// Flat gradient over `[backbone params, head weight, head bias]`.
    pub fn backward(
        &self,
        x: &Array4<f64>,
        out: &ModelOut,
        d_logits: &Array2<f64>,
        map_grads: Option<&[Array4<f64>]>,
    ) -> Array1<f64> {
        let (dw_head, db_head, d_emb) = self.head.backward(&out.acts.embeddings, d_logits);
        let bb = self.backbone.backward(x, &out.acts, &d_emb, map_grads);
        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend(bb.iter());
        flat.extend(dw_head.iter());
        flat.extend(db_head.iter());
        Array1::from_vec(flat)
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + self.head.param_count()
    }

    pub fn flat_params(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(self.backbone.flat_params().iter());
        self.head.push_params(&mut out);
        Array1::from_vec(out)
    }

    pub fn set_flat_params(&mut self, params: ArrayView1<f64>) {
        assert_eq!(params.len(), self.param_count(), "parameter length");
        let bb_len = self.backbone.param_count();
        self.backbone
            .set_flat_params(params.slice(ndarray::s![..bb_len]));
        let rest = params.slice(ndarray::s![bb_len..]).to_vec();
        self.head.load_params(&mut rest.iter());
    }

    /// Widens the head by `n_new` outputs. Old rows and biases are copied
    /// bit-exact; new rows take a fresh seeded init.
    pub fn expand_head(&mut self, n_new: usize, rng: &mut ChaCha8Rng) -> Result<(), ModelError> {
        expand_linear(&mut self.head, n_new, rng)
    }

    pub fn named_params(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out: Vec<(String, ArrayD<f64>)> = self
            .backbone
            .named_params()
            .into_iter()
            .map(|(n, a)| (format!("backbone.{n}"), a))
            .collect();
        out.push(("head.weight".into(), self.head.weight.clone().into_dyn()));
        out.push(("head.bias".into(), self.head.bias.clone().into_dyn()));
        out
    }

    /// Writes the checkpoint archive plus its JSON sidecar.
    pub fn save(&self, path: &std::path::Path, config_hash: u64) -> Result<(), ModelError> {
        let meta = CheckpointMeta {
            n_classes_seen: self.n_classes_seen(),
            branch_dims: vec![self.feature_dim()],
            config_hash,
        };
        save_checkpoint(path, &self.named_params(), &meta)
    }

    /// Restores parameters by name into a model of identical architecture.
    pub fn restore(&mut self, path: &std::path::Path) -> Result<CheckpointMeta, ModelError> {
        let (arrays, meta) = load_checkpoint(path)?;
        let mut by_name: std::collections::BTreeMap<String, ArrayD<f64>> =
            arrays.into_iter().collect();
        // Head width may differ from the freshly built model.
        let head_w = by_name
            .remove("head.weight")
            .ok_or_else(|| ModelError::CheckpointFormat("missing head.weight".into()))?;
        let head_b = by_name
            .remove("head.bias")
            .ok_or_else(|| ModelError::CheckpointFormat("missing head.bias".into()))?;
        let head_w: Array2<f64> = head_w
            .into_dimensionality()
            .map_err(|e| ModelError::CheckpointFormat(e.to_string()))?;
        let head_b: Array1<f64> = head_b
            .into_dimensionality()
            .map_err(|e| ModelError::CheckpointFormat(e.to_string()))?;
        if head_w.ncols() != self.feature_dim() {
            return Err(ModelError::DimMismatch(format!(
                "checkpoint head expects feature_dim {}, model has {}",
                head_w.ncols(),
                self.feature_dim()
            )));
        }
        self.head = Linear {
            weight: head_w,
            bias: head_b,
        };

        let expected = self.backbone.named_params();
        let mut flat = Vec::with_capacity(self.backbone.param_count());
        for (name, current) in expected {
            let loaded = by_name
                .remove(name.trim_start_matches("backbone."))
                .or_else(|| by_name.remove(&format!("backbone.{name}")))
                .or_else(|| by_name.remove(&name))
                .ok_or_else(|| ModelError::CheckpointFormat(format!("missing {name}")))?;
            if loaded.shape() != current.shape() {
                return Err(ModelError::DimMismatch(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    loaded.shape(),
                    current.shape()
                )));
            }
            flat.extend(loaded.iter());
        }
        self.backbone.set_flat_params(Array1::from_vec(flat).view());
        Ok(meta)
    }
}

/// Shared head-expansion primitive: copy old rows, seed new ones.
pub(crate) fn expand_linear(
    head: &mut Linear,
    n_new: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(), ModelError> {
    if n_new == 0 {
        return Err(ModelError::ZeroExpansion);
    }
    let (old_out, in_dim) = (head.out_dim(), head.in_dim());
    let fresh = Linear::new(in_dim, old_out + n_new, rng);
    let mut weight = fresh.weight;
    let mut bias = fresh.bias;
    weight
        .slice_mut(ndarray::s![..old_out, ..])
        .assign(&head.weight);
    bias.slice_mut(ndarray::s![..old_out]).assign(&head.bias);
    head.weight = weight;
    head.bias = bias;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::Array4;
    use rand_distr::{Distribution, Normal};

    fn tiny_model(n_classes: usize, seed: u64) -> IncrementalModel {
        let mut r = rng::stream(seed, "model-init");
        let backbone = Box::new(TinyCnn::new(8, &mut r));
        IncrementalModel::new(backbone, n_classes, &mut r)
    }

    fn random_input(b: usize, seed: u64) -> Array4<f64> {
        let mut r = rng::stream(seed, "model-input");
        let normal = Normal::new(0.0, 1.0).unwrap();
        Array4::from_shape_fn((b, 1, 16, 20), |_| normal.sample(&mut r))
    }

    #[test]
    fn unknown_backbone_lists_registry() {
        let mut r = rng::stream(1, "x");
        let Err(err) = build_backbone("resnet-152", 8, &mut r) else {
            panic!("expected an error");
        };
        match err {
            ModelError::UnknownBackbone { name, known } => {
                assert_eq!(name, "resnet-152");
                assert_eq!(known, vec!["tiny-cnn", "mini-resnet"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn seeded_backbone_init_is_identical() {
        let mut r1 = rng::stream(5, "b");
        let mut r2 = rng::stream(5, "b");
        let a = build_backbone("tiny-cnn", 8, &mut r1).unwrap();
        let b = build_backbone("tiny-cnn", 8, &mut r2).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
    }

    #[test]
    fn expand_head_preserves_old_logits_bit_exact() {
        let mut model = tiny_model(5, 3);
        let x = random_input(4, 7);
        let before = model.forward(&x).logits;
        let mut r = rng::stream(9, "expand");
        model.expand_head(3, &mut r).unwrap();
        assert_eq!(model.n_classes_seen(), 8);
        let after = model.forward(&x).logits;
        for b in 0..4 {
            for c in 0..5 {
                assert_eq!(before[[b, c]], after[[b, c]], "old logit changed");
            }
        }
    }

    #[test]
    fn repeated_expansion_matches_single_expansion_on_old_block() {
        let model = tiny_model(5, 3);
        let x = random_input(2, 7);

        let mut twice = model.clone();
        let mut r1 = rng::stream(11, "expand");
        twice.expand_head(2, &mut r1).unwrap();
        twice.expand_head(3, &mut r1).unwrap();

        let mut once = model.clone();
        let mut r2 = rng::stream(13, "expand-other");
        once.expand_head(5, &mut r2).unwrap();

        let a = twice.forward(&x).logits;
        let b = once.forward(&x).logits;
        for bi in 0..2 {
            for c in 0..5 {
                assert_eq!(a[[bi, c]], b[[bi, c]]);
            }
        }
    }

    #[test]
    fn zero_expansion_is_an_error() {
        let mut model = tiny_model(5, 3);
        let mut r = rng::stream(1, "e");
        assert!(matches!(
            model.expand_head(0, &mut r),
            Err(ModelError::ZeroExpansion)
        ));
    }

    #[test]
    fn model_backward_matches_finite_differences() {
        let model = tiny_model(3, 17);
        let x = random_input(2, 19);
        let out = model.forward(&x);
        let w = Array2::from_shape_fn(out.logits.raw_dim(), |(i, j)| {
            ((i + 2 * j) % 3) as f64 * 0.4 - 0.3
        });
        let grad = model.backward(&x, &out, &w, None);
        assert_eq!(grad.len(), model.param_count());

        let mut probe_model = model.clone();
        let mut params = model.flat_params();
        let eps = 1e-5;
        let n = params.len();
        for idx in [0, n / 5, n / 2, n - 2, n - 1] {
            let orig = params[idx];
            params[idx] = orig + eps;
            probe_model.set_flat_params(params.view());
            let up = (probe_model.forward(&x).logits * &w).sum();
            params[idx] = orig - eps;
            probe_model.set_flat_params(params.view());
            let down = (probe_model.forward(&x).logits * &w).sum();
            params[idx] = orig;
            probe_model.set_flat_params(params.view());
            let fd = (up - down) / (2.0 * eps);
            assert!(
                (fd - grad[idx]).abs() < 1e-4 * (1.0 + fd.abs()),
                "param {idx}: fd {fd} vs {got}",
                got = grad[idx]
            );
        }
    }

    #[test]
    fn embed_unit_rows_have_unit_norm() {
        let model = tiny_model(3, 23);
        let x = random_input(3, 29);
        let e = model.embed_unit(&x);
        for row in e.rows() {
            let norm = row.dot(&row).sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model(4, 31);
        model.save(&path, 0xabcd).unwrap();
        assert!(path.with_extension("json").is_file());

        let mut other = tiny_model(2, 99);
        let meta = other.restore(&path).unwrap();
        assert_eq!(meta.n_classes_seen, 4);
        assert_eq!(meta.config_hash, 0xabcd);
        assert_eq!(other.flat_params(), model.flat_params());
        assert_eq!(other.n_classes_seen(), 4);
    }
}
