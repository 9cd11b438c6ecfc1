//! Stochastic cosine classifier for few-shot sessions.
//!
//! Each class keeps a weight mean and a log-variance; training samples a
//! weight per forward via the reparameterization `w = mean + eps * std` and
//! scores by scaled cosine similarity. Inference uses the means directly.
//! New classes are imprinted from the normalized mean of their few shots.

use ndarray::{s, Array1, Array2};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ModelError;

/// Log-variances are clamped here; `exp(0.5 * floor)` is ~2e-9, far below
/// any logit tolerance, so the floored classifier behaves deterministically.
pub const LOG_VAR_FLOOR: f64 = -40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScMode {
    Sample,
    Mean,
}

#[derive(Debug, Clone)]
pub struct StochasticClassifier {
    pub weight_mean: Array2<f64>,
    pub weight_log_var: Array2<f64>,
    /// Cosine logit scale; logits are bounded by it in absolute value.
    pub scale: f64,
}

/// Forward record needed to backpropagate through a sampled forward.
pub struct ScCache {
    /// The weights actually used: `mean + eps * std`.
    weights: Array2<f64>,
    eps: Array2<f64>,
    pub logits: Array2<f64>,
}

impl StochasticClassifier {
    pub fn new(n_classes: usize, dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / dim as f64).sqrt();
        let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
        Self {
            weight_mean: Array2::from_shape_fn((n_classes, dim), |_| normal.sample(rng)),
            weight_log_var: Array2::from_elem((n_classes, dim), -4.0),
            scale,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weight_mean.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weight_mean.ncols()
    }

    /// Appends `n_new` class rows (seeded init, log-var -4).
    pub fn expand(&mut self, n_new: usize, rng: &mut ChaCha8Rng) -> Result<(), ModelError> {
        if n_new == 0 {
            return Err(ModelError::ZeroExpansion);
        }
        let (old, dim) = (self.n_classes(), self.dim());
        let std = (2.0 / dim as f64).sqrt();
        let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
        let mut mean = Array2::from_shape_fn((old + n_new, dim), |_| normal.sample(rng));
        let mut log_var = Array2::from_elem((old + n_new, dim), -4.0);
        mean.slice_mut(s![..old, ..]).assign(&self.weight_mean);
        log_var
            .slice_mut(s![..old, ..])
            .assign(&self.weight_log_var);
        self.weight_mean = mean;
        self.weight_log_var = log_var;
        Ok(())
    }

    /// Sets a class's weight mean to a (normalized) embedding mean.
    pub fn imprint(&mut self, class: usize, embedding_mean: &Array1<f64>) {
        let norm = embedding_mean.dot(embedding_mean).sqrt();
        let row = if norm > 1e-12 {
            embedding_mean / norm
        } else {
            embedding_mean.clone()
        };
        self.weight_mean.row_mut(class).assign(&row);
    }

    fn clamped_std(&self) -> Array2<f64> {
        self.weight_log_var
            .mapv(|lv| (0.5 * lv.max(LOG_VAR_FLOOR)).exp())
    }

    /// Logits for `embeddings` `(batch, dim)`.
    pub fn logits(
        &self,
        embeddings: &Array2<f64>,
        mode: ScMode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Array2<f64>, ModelError> {
        match mode {
            ScMode::Mean => {
                self.check_dim(embeddings)?;
                Ok(cosine_logits(embeddings, &self.weight_mean, self.scale))
            }
            ScMode::Sample => {
                let rng = rng.expect("sample mode needs an rng");
                Ok(self.forward_train(embeddings, rng)?.logits)
            }
        }
    }

    /// Sampled forward keeping what backward needs.
    pub fn forward_train(
        &self,
        embeddings: &Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ScCache, ModelError> {
        self.check_dim(embeddings)?;
        let eps = Array2::from_shape_fn(self.weight_mean.raw_dim(), |_| StandardNormal.sample(rng));
        let weights = &self.weight_mean + &(&eps * &self.clamped_std());
        let logits = cosine_logits(embeddings, &weights, self.scale);
        Ok(ScCache {
            weights,
            eps,
            logits,
        })
    }

    /// Gradients of a scalar loss given `d_logits`:
    /// `(d_weight_mean, d_weight_log_var, d_embeddings)`.
    pub fn backward(
        &self,
        embeddings: &Array2<f64>,
        cache: &ScCache,
        d_logits: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let (batch, dim) = (embeddings.nrows(), embeddings.ncols());
        let classes = self.n_classes();
        let mut d_weights = Array2::zeros((classes, dim));
        let mut d_emb = Array2::zeros((batch, dim));

        for b in 0..batch {
            let e = embeddings.row(b);
            let e_norm = e.dot(&e).sqrt();
            if e_norm < 1e-12 {
                continue;
            }
            let e_hat = e.to_owned() / e_norm;
            for c in 0..classes {
                let g = d_logits[[b, c]];
                if g == 0.0 {
                    continue;
                }
                let w = cache.weights.row(c);
                let w_norm = w.dot(&w).sqrt();
                if w_norm < 1e-12 {
                    continue;
                }
                let w_hat = w.to_owned() / w_norm;
                let cos = e_hat.dot(&w_hat);
                // d cos / d w = (e_hat - cos * w_hat) / |w|, symmetric in e.
                let dw = (&e_hat - &(&w_hat * cos)) / w_norm * (self.scale * g);
                let de = (&w_hat - &(&e_hat * cos)) / e_norm * (self.scale * g);
                d_weights.row_mut(c).scaled_add(1.0, &dw);
                d_emb.row_mut(b).scaled_add(1.0, &de);
            }
        }

        // Reparameterization: w = mean + eps * exp(0.5 * lv).
        let d_mean = d_weights.clone();
        let std = self.clamped_std();
        let d_log_var = &d_weights * &cache.eps * &std * 0.5;
        (d_mean, d_log_var, d_emb)
    }

    fn check_dim(&self, embeddings: &Array2<f64>) -> Result<(), ModelError> {
        if embeddings.ncols() != self.dim() {
            return Err(ModelError::DimMismatch(format!(
                "embedding dim {} vs classifier dim {}",
                embeddings.ncols(),
                self.dim()
            )));
        }
        Ok(())
    }
}

fn cosine_logits(embeddings: &Array2<f64>, weights: &Array2<f64>, scale: f64) -> Array2<f64> {
    let mut e = embeddings.clone();
    for mut row in e.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 1e-12 {
            row /= n;
        }
    }
    let mut w = weights.clone();
    for mut row in w.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 1e-12 {
            row /= n;
        }
    }
    e.dot(&w.t()) * scale
}
