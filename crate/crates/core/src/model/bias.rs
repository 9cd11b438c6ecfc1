//! Two-parameter bias correction for the newest class group.
//!
//! After training on an imbalanced old/new mix, the newest classes' logits
//! are recalibrated as `alpha * logit + beta` while every other logit passes
//! through untouched. The parameters are fit by gradient descent on the
//! cross-entropy of a balanced held-out split, with the model frozen.

use ndarray::Array2;

/// Affine correction applied to class positions `start..end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasLayer {
    pub alpha: f64,
    pub beta: f64,
    pub start: usize,
    pub end: usize,
}

impl BiasLayer {
    /// Identity correction: logits unchanged until fitted.
    pub fn identity(start: usize, end: usize) -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
            start,
            end,
        }
    }

    pub fn apply(&self, logits: &mut Array2<f64>) {
        for mut row in logits.rows_mut() {
            for c in self.start..self.end.min(row.len()) {
                row[c] = self.alpha * row[c] + self.beta;
            }
        }
    }
}

/// Fits `(alpha, beta)` on precomputed validation logits by seeded gradient
/// descent with a fixed step budget. `labels` are class positions.
pub fn fit_bias(
    logits: &Array2<f64>,
    labels: &[usize],
    start: usize,
    end: usize,
    steps: usize,
    lr: f64,
) -> BiasLayer {
    assert_eq!(logits.nrows(), labels.len(), "one label per row");
    let mut layer = BiasLayer::identity(start, end);
    let batch = logits.nrows() as f64;

    for _ in 0..steps {
        let mut corrected = logits.clone();
        layer.apply(&mut corrected);

        // d CE / d corrected_j = softmax_j - [j == label]; the chain rule
        // gives d/d_alpha = sum over new positions of that times the raw
        // logit, d/d_beta the plain sum.
        let (mut d_alpha, mut d_beta) = (0.0, 0.0);
        for (i, &label) in labels.iter().enumerate() {
            let row = corrected.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in start..end.min(row.len()) {
                let p = exps[c] / z;
                let d_logit = (p - if c == label { 1.0 } else { 0.0 }) / batch;
                d_alpha += d_logit * logits[[i, c]];
                d_beta += d_logit;
            }
        }
        layer.alpha -= lr * d_alpha;
        layer.beta -= lr * d_beta;
    }
    layer
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_leaves_logits_unchanged() {
        let layer = BiasLayer::identity(1, 3);
        let mut logits = array![[1.0, 2.0, 3.0], [0.5, -1.0, 0.0]];
        let before = logits.clone();
        layer.apply(&mut logits);
        assert_eq!(logits, before);
    }

    #[test]
    fn correction_never_touches_old_group() {
        let layer = BiasLayer {
            alpha: 0.5,
            beta: -1.0,
            start: 2,
            end: 4,
        };
        let mut logits = array![[1.0, 2.0, 3.0, 4.0]];
        layer.apply(&mut logits);
        assert_eq!(logits, array![[1.0, 2.0, 0.5, 1.0]]);
    }

    #[test]
    fn recovers_half_when_new_logits_doubled() {
        // Calibrated clean logits over 2 old + 2 new classes: for each
        // pattern, labels appear in exactly the softmax proportions (7:1:1:1),
        // so the clean logits are the CE optimum over any correction. After
        // inflating the new columns by exactly 2x, the unique optimum of the
        // affine correction is alpha = 0.5, beta = 0.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for pattern in 0..4usize {
            let mut clean = vec![0.1f64.ln(); 4];
            clean[pattern] = 0.7f64.ln();
            let mut inflated = clean.clone();
            inflated[2] *= 2.0;
            inflated[3] *= 2.0;
            for label in 0..4usize {
                let copies = if label == pattern { 7 } else { 1 };
                for _ in 0..copies {
                    rows.push(inflated.clone());
                    labels.push(label);
                }
            }
        }
        let logits =
            Array2::from_shape_vec((rows.len(), 4), rows.into_iter().flatten().collect()).unwrap();
        let layer = fit_bias(&logits, &labels, 2, 4, 2000, 0.05);
        assert!(
            layer.alpha > 0.4 && layer.alpha < 0.6,
            "alpha = {}",
            layer.alpha
        );

        // Grid-search oracle: the CE minimum over (alpha, beta) sits near
        // alpha = 0.5 as well.
        let ce = |alpha: f64, beta: f64| -> f64 {
            let mut total = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                let mut row: Vec<f64> = logits.row(i).to_vec();
                for v in &mut row[2..4] {
                    *v = alpha * *v + beta;
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                total -= row[label] - max - z.ln();
            }
            total / labels.len() as f64
        };
        let mut best = (f64::INFINITY, 0.0);
        let mut alpha = 0.0;
        while alpha <= 1.5 {
            let v = ce(alpha, 0.0);
            if v < best.0 {
                best = (v, alpha);
            }
            alpha += 0.02;
        }
        assert!(
            (best.1 - 0.5).abs() < 0.1,
            "grid oracle minimum at alpha = {}",
            best.1
        );
        // Fit should be at least as good as the zero-beta grid optimum.
        assert!(ce(layer.alpha, layer.beta) <= best.0 + 5e-3);
    }
}
