//! Dynamically expandable representation: one backbone branch per task.
//!
//! Every expansion freezes the existing branches and appends a trainable one;
//! the head is rebuilt over the concatenated embedding. Gradients returned by
//! [`DerModel::backward`] carry explicit zero segments for frozen branches,
//! so any optimizer step leaves them bit-identical.

use ndarray::{s, Array1, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use super::nn::Linear;
use super::{Backbone, BackboneActs, ModelError};

pub struct DerOut {
    pub branch_acts: Vec<BackboneActs>,
    /// `(batch, sum of branch dims)` concatenated embeddings.
    pub embeddings: Array2<f64>,
    pub logits: Array2<f64>,
    /// `(batch, n_new + 1)` auxiliary logits; present after any expansion.
    pub aux_logits: Option<Array2<f64>>,
}

#[derive(Clone)]
pub struct DerModel {
    branches: Vec<Box<dyn Backbone>>,
    head: Linear,
    /// (n_new + 1)-way head over the newest branch: new classes + an
    /// "old classes" lump at index 0.
    aux_head: Option<Linear>,
}

impl DerModel {
    pub fn new(first_branch: Box<dyn Backbone>, n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let head = Linear::new(first_branch.feature_dim(), n_classes, rng);
        Self {
            branches: vec![first_branch],
            head,
            aux_head: None,
        }
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn branch_dims(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.feature_dim()).collect()
    }

    pub fn total_dim(&self) -> usize {
        self.branch_dims().iter().sum()
    }

    pub fn n_classes_seen(&self) -> usize {
        self.head.out_dim()
    }

    /// Freezes existing branches, appends a new one, rebuilds the head over
    /// the widened embedding, and installs a fresh `(n_new + 1)`-way aux head.
    ///
    /// Old head weights land on the old feature columns and old class rows
    /// bit-exact; every weight touching the new branch or the new classes is
    /// freshly initialized. `clone_last` starts the new branch from the last
    /// branch's parameters instead of a fresh init.
    pub fn expand(
        &mut self,
        n_new: usize,
        clone_last: bool,
        mut fresh_branch: impl FnMut(&mut ChaCha8Rng) -> Box<dyn Backbone>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), ModelError> {
        if n_new == 0 {
            return Err(ModelError::ZeroExpansion);
        }
        let new_branch = if clone_last {
            self.branches.last().expect("at least one branch").clone()
        } else {
            fresh_branch(rng)
        };
        let new_dim = new_branch.feature_dim();
        let old_dim = self.total_dim();
        let old_classes = self.head.out_dim();

        let fresh = Linear::new(old_dim + new_dim, old_classes + n_new, rng);
        let mut weight = fresh.weight;
        let mut bias = fresh.bias;
        weight
            .slice_mut(s![..old_classes, ..old_dim])
            .assign(&self.head.weight);
        bias.slice_mut(s![..old_classes]).assign(&self.head.bias);
        self.head = Linear { weight, bias };

        self.aux_head = Some(Linear::new(new_dim, n_new + 1, rng));
        self.branches.push(new_branch);
        Ok(())
    }

    pub fn forward(&self, x: &Array4<f64>) -> DerOut {
        let branch_acts: Vec<BackboneActs> = self.branches.iter().map(|b| b.forward(x)).collect();
        let views: Vec<_> = branch_acts.iter().map(|a| a.embeddings.view()).collect();
        let embeddings = ndarray::concatenate(Axis(1), &views).expect("same batch size");
        let logits = self.head.forward(&embeddings);
        let aux_logits = self
            .aux_head
            .as_ref()
            .map(|aux| aux.forward(&branch_acts.last().expect("branch").embeddings));
        DerOut {
            branch_acts,
            embeddings,
            logits,
            aux_logits,
        }
    }

    /// Flat gradient over `[branch_0, ..., branch_k, head, aux_head]` with
    /// zero segments for all frozen (non-last) branches.
    pub fn backward(
        &self,
        x: &Array4<f64>,
        out: &DerOut,
        d_logits: &Array2<f64>,
        d_aux_logits: Option<&Array2<f64>>,
    ) -> Array1<f64> {
        let (dw_head, db_head, d_emb) = self.head.backward(&out.embeddings, d_logits);

        let last_idx = self.branches.len() - 1;
        let dims = self.branch_dims();
        let offset: usize = dims[..last_idx].iter().sum();
        let mut d_last_emb = d_emb
            .slice(s![.., offset..offset + dims[last_idx]])
            .to_owned();

        let mut aux_grads: Option<(Array2<f64>, Array1<f64>)> = None;
        if let (Some(aux), Some(d_aux)) = (&self.aux_head, d_aux_logits) {
            let last_emb = &out.branch_acts[last_idx].embeddings;
            let (dw_aux, db_aux, d_emb_aux) = aux.backward(last_emb, d_aux);
            d_last_emb += &d_emb_aux;
            aux_grads = Some((dw_aux, db_aux));
        }

        let mut flat = Vec::with_capacity(self.param_count());
        for (i, branch) in self.branches.iter().enumerate() {
            if i == last_idx {
                let g = branch.backward(x, &out.branch_acts[i], &d_last_emb, None);
                flat.extend(g.iter());
            } else {
                // Frozen: contributes exactly zero gradient.
                flat.extend(std::iter::repeat_n(0.0, branch.param_count()));
            }
        }
        flat.extend(dw_head.iter());
        flat.extend(db_head.iter());
        if let Some(aux) = &self.aux_head {
            match aux_grads {
                Some((dw, db)) => {
                    flat.extend(dw.iter());
                    flat.extend(db.iter());
                }
                None => flat.extend(std::iter::repeat_n(0.0, aux.param_count())),
            }
        }
        Array1::from_vec(flat)
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().map(|b| b.param_count()).sum::<usize>()
            + self.head.param_count()
            + self.aux_head.as_ref().map_or(0, Linear::param_count)
    }

    pub fn flat_params(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for branch in &self.branches {
            out.extend(branch.flat_params().iter());
        }
        self.head.push_params(&mut out);
        if let Some(aux) = &self.aux_head {
            aux.push_params(&mut out);
        }
        Array1::from_vec(out)
    }

    pub fn set_flat_params(&mut self, params: ndarray::ArrayView1<f64>) {
        assert_eq!(params.len(), self.param_count(), "parameter length");
        let mut offset = 0;
        for branch in &mut self.branches {
            let n = branch.param_count();
            branch.set_flat_params(params.slice(s![offset..offset + n]));
            offset += n;
        }
        let rest = params.slice(s![offset..]).to_vec();
        let mut it = rest.iter();
        self.head.load_params(&mut it);
        if let Some(aux) = &mut self.aux_head {
            aux.load_params(&mut it);
        }
    }

    /// Index range of the frozen segment in the flat parameter layout.
    pub fn frozen_param_range(&self) -> std::ops::Range<usize> {
        let frozen: usize = self.branches[..self.branches.len() - 1]
            .iter()
            .map(|b| b.param_count())
            .sum();
        0..frozen
    }

    pub fn named_params(&self) -> Vec<(String, ndarray::ArrayD<f64>)> {
        let mut out = Vec::new();
        for (i, branch) in self.branches.iter().enumerate() {
            for (n, a) in branch.named_params() {
                out.push((format!("branch{i}.{n}"), a));
            }
        }
        out.push(("head.weight".into(), self.head.weight.clone().into_dyn()));
        out.push(("head.bias".into(), self.head.bias.clone().into_dyn()));
        if let Some(aux) = &self.aux_head {
            out.push(("aux.weight".into(), aux.weight.clone().into_dyn()));
            out.push(("aux.bias".into(), aux.bias.clone().into_dyn()));
        }
        out
    }

    /// Writes the checkpoint archive; the sidecar records one feature dim
    /// per branch.
    pub fn save(&self, path: &std::path::Path, config_hash: u64) -> Result<(), ModelError> {
        let meta = super::CheckpointMeta {
            n_classes_seen: self.n_classes_seen(),
            branch_dims: self.branch_dims(),
            config_hash,
        };
        super::save_checkpoint(path, &self.named_params(), &meta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FlatLinear;
    use crate::rng;
    use rand_distr::{Distribution, Normal};

    fn branch(seed: u64) -> Box<dyn Backbone> {
        let mut r = rng::stream(seed, "der-branch");
        Box::new(FlatLinear::new(4, 5, 6, &mut r))
    }

    fn input(b: usize, seed: u64) -> Array4<f64> {
        let mut r = rng::stream(seed, "der-input");
        let n = Normal::new(0.0, 1.0).unwrap();
        Array4::from_shape_fn((b, 1, 4, 5), |_| n.sample(&mut r))
    }

    #[test]
    fn concat_dim_is_sum_of_branches() {
        let mut r = rng::stream(1, "der");
        let mut model = DerModel::new(branch(2), 4, &mut r);
        model
            .expand(
                2,
                false,
                |rr| Box::new(FlatLinear::new(4, 5, 6, rr)),
                &mut r,
            )
            .unwrap();
        assert_eq!(model.total_dim(), 12);
        assert_eq!(model.n_classes_seen(), 6);
        let out = model.forward(&input(3, 5));
        assert_eq!(out.embeddings.shape(), &[3, 12]);
        assert_eq!(out.logits.shape(), &[3, 6]);
        assert_eq!(out.aux_logits.as_ref().unwrap().shape(), &[3, 3]);
    }

    #[test]
    fn forward_equals_per_branch_concatenation() {
        let mut r = rng::stream(3, "der");
        let mut model = DerModel::new(branch(4), 4, &mut r);
        model
            .expand(
                2,
                false,
                |rr| Box::new(FlatLinear::new(4, 5, 6, rr)),
                &mut r,
            )
            .unwrap();
        let x = input(2, 7);
        let out = model.forward(&x);
        for (i, acts) in out.branch_acts.iter().enumerate() {
            let cols = out.embeddings.slice(s![.., i * 6..(i + 1) * 6]).to_owned();
            assert_eq!(cols, acts.embeddings, "branch {i} block");
        }
    }

    #[test]
    fn frozen_branch_gradients_are_exactly_zero() {
        let mut r = rng::stream(5, "der");
        let mut model = DerModel::new(branch(6), 4, &mut r);
        model
            .expand(
                3,
                false,
                |rr| Box::new(FlatLinear::new(4, 5, 6, rr)),
                &mut r,
            )
            .unwrap();
        let x = input(3, 9);
        let out = model.forward(&x);
        // Arbitrary loss gradients on both heads.
        let d_logits = Array2::from_shape_fn(out.logits.raw_dim(), |(i, j)| {
            ((i * 5 + j) % 3) as f64 - 1.0
        });
        let d_aux = Array2::from_shape_fn(out.aux_logits.as_ref().unwrap().raw_dim(), |(i, j)| {
            ((i + j) % 2) as f64 * 0.5
        });
        let g = model.backward(&x, &out, &d_logits, Some(&d_aux));
        assert_eq!(g.len(), model.param_count());
        let frozen = model.frozen_param_range();
        assert!(frozen.end > 0);
        assert!(g.slice(s![frozen]).iter().all(|v| *v == 0.0));
        // Trainable segment is live.
        assert!(g
            .slice(s![model.frozen_param_range().end..])
            .iter()
            .any(|v| v.abs() > 0.0));
    }

    #[test]
    fn expansion_keeps_old_weights_on_old_columns() {
        let mut r = rng::stream(7, "der");
        let mut model = DerModel::new(branch(8), 4, &mut r);
        let w_before = model.head.weight.clone();
        model
            .expand(
                2,
                false,
                |rr| Box::new(FlatLinear::new(4, 5, 6, rr)),
                &mut r,
            )
            .unwrap();
        let block = model.head.weight.slice(s![..4, ..6]).to_owned();
        assert_eq!(block, w_before);
    }

    #[test]
    fn clone_last_copies_branch_parameters() {
        let mut r = rng::stream(9, "der");
        let mut model = DerModel::new(branch(10), 4, &mut r);
        let last_params = model.branches[0].flat_params();
        model
            .expand(2, true, |rr| Box::new(FlatLinear::new(4, 5, 6, rr)), &mut r)
            .unwrap();
        assert_eq!(model.branches[1].flat_params(), last_params);
    }

    #[test]
    fn zero_expansion_rejected() {
        let mut r = rng::stream(11, "der");
        let mut model = DerModel::new(branch(12), 4, &mut r);
        assert!(matches!(
            model.expand(
                0,
                false,
                |rr| Box::new(FlatLinear::new(4, 5, 6, rr)),
                &mut r
            ),
            Err(ModelError::ZeroExpansion)
        ));
    }

    #[test]
    fn checkpoint_records_branch_dims() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("der.ckpt");
        let mut r = rng::stream(13, "der");
        let mut model = DerModel::new(branch(14), 4, &mut r);
        model
            .expand(
                2,
                false,
                |rr| Box::new(FlatLinear::new(4, 5, 6, rr)),
                &mut r,
            )
            .unwrap();
        model.save(&path, 7).unwrap();
        let (arrays, meta) = crate::model::load_checkpoint(&path).unwrap();
        assert_eq!(meta.branch_dims, vec![6, 6]);
        assert_eq!(meta.n_classes_seen, 6);
        let loaded: f64 = arrays
            .iter()
            .flat_map(|(_, a)| a.iter())
            .map(|v| v * v)
            .sum();
        let expect: f64 = model.flat_params().iter().map(|v| v * v).sum();
        assert!((loaded - expect).abs() < 1e-9);
    }
}
