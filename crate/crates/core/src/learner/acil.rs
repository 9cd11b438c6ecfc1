//! Analytic classifier over randomly expanded frozen features.
//!
//! Embeddings pass through a fixed seeded random projection and a ReLU into
//! an expanded feature space, where a ridge-regression classifier is kept
//! exactly via recursive least squares: after any sequence of updates the
//! weights equal the batch ridge solution over all data seen, so old tasks
//! are never degraded by new ones. The running inverse-autocorrelation
//! matrix is updated through the Woodbury identity, symmetrized, and checked
//! for positive definiteness after every step.

use ndarray::{s, Array2};
use rand_distr::{Distribution, Normal};

use super::LearnerError;
use crate::linalg::{cholesky, cholesky_solve_mat};
use crate::rng;

#[derive(Debug, Clone)]
pub struct AcilState {
    /// Fixed `(feature_dim, expansion_dim)` random projection.
    projection: Array2<f64>,
    /// `(expansion_dim, expansion_dim)` regularized inverse autocorrelation.
    r: Array2<f64>,
    /// `(expansion_dim, n_classes)` classifier weights.
    w: Array2<f64>,
    gamma: f64,
}

impl AcilState {
    /// Starts an analytic classifier with `R = I / gamma` and no classes.
    pub fn new(
        feature_dim: usize,
        expansion_dim: usize,
        gamma: f64,
        seed: u64,
    ) -> Result<Self, LearnerError> {
        if gamma <= 0.0 {
            return Err(LearnerError::Shape(format!(
                "ridge gamma must be positive, got {gamma}"
            )));
        }
        let mut r = rng::stream(seed, "acil-projection");
        let normal = Normal::new(0.0, (1.0 / feature_dim as f64).sqrt()).expect("finite std");
        let projection =
            Array2::from_shape_fn((feature_dim, expansion_dim), |_| normal.sample(&mut r));
        Ok(Self {
            projection,
            r: Array2::eye(expansion_dim) / gamma,
            w: Array2::zeros((expansion_dim, 0)),
            gamma,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn n_classes(&self) -> usize {
        self.w.ncols()
    }

    pub fn expansion_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.nrows()
    }

    /// Current classifier weights, `(expansion_dim, n_classes)`.
    pub fn weights_view(&self) -> ndarray::ArrayView2<'_, f64> {
        self.w.view()
    }

    /// Appends zero-initialized weight columns for `n_new` classes.
    pub fn expand_classes(&mut self, n_new: usize) {
        let (d, old) = (self.w.nrows(), self.w.ncols());
        let mut w = Array2::zeros((d, old + n_new));
        w.slice_mut(s![.., ..old]).assign(&self.w);
        self.w = w;
    }

    /// ReLU of the random projection.
    pub fn expanded(&self, embeddings: &Array2<f64>) -> Result<Array2<f64>, LearnerError> {
        if embeddings.ncols() != self.feature_dim() {
            return Err(LearnerError::Shape(format!(
                "embedding dim {} vs projection rows {}",
                embeddings.ncols(),
                self.feature_dim()
            )));
        }
        Ok(embeddings.dot(&self.projection).mapv(|v| v.max(0.0)))
    }

    /// Folds a labeled batch into `(R, W)` so that `W` remains the exact
    /// ridge solution over everything seen so far.
    pub fn update(
        &mut self,
        embeddings: &Array2<f64>,
        labels: &[usize],
    ) -> Result<(), LearnerError> {
        if embeddings.nrows() != labels.len() {
            return Err(LearnerError::Shape(format!(
                "{} embedding rows vs {} labels",
                embeddings.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.n_classes()) {
            return Err(LearnerError::LabelOutOfRange {
                label: bad,
                width: self.n_classes(),
            });
        }
        let phi = self.expanded(embeddings)?;
        let n = phi.nrows();

        // Woodbury downdate: R' = R - (phi R)' K^-1 (phi R),
        // K = I + phi R phi'.
        let phi_r = phi.dot(&self.r);
        let mut k = phi_r.dot(&phi.t());
        for i in 0..n {
            k[[i, i]] += 1.0;
        }
        let l = cholesky(k.view())?;
        let solved = cholesky_solve_mat(&l, phi_r.view());
        self.r -= &phi_r.t().dot(&solved);
        // Symmetrize, then insist R stayed positive definite.
        self.r = (&self.r + &self.r.t()) * 0.5;
        cholesky(self.r.view()).map_err(|_| LearnerError::RidgeStateNotPd)?;

        let mut targets = Array2::zeros((n, self.n_classes()));
        for (i, &label) in labels.iter().enumerate() {
            targets[[i, label]] = 1.0;
        }
        let residual = &targets - &phi.dot(&self.w);
        self.w += &self.r.dot(&phi.t().dot(&residual));
        Ok(())
    }

    /// Class scores `relu(e P) W`.
    pub fn scores(&self, embeddings: &Array2<f64>) -> Result<Array2<f64>, LearnerError> {
        Ok(self.expanded(embeddings)?.dot(&self.w))
    }
}
