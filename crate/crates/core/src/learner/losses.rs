//! Loss kernels shared by the incremental learners.
//!
//! Every loss comes in a value/gradient pair; the gradient functions are the
//! ones training actually uses, and the scalar functions back the
//! finite-difference checks in the test suites.

use ndarray::{s, Array1, Array2, Array4, ArrayView1};

use super::LearnerError;
use crate::model::nn::dims4;

/// Row-wise softmax with max-shift.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

fn check_labels(logits: &Array2<f64>, labels: &[usize]) -> Result<(), LearnerError> {
    if labels.is_empty() {
        return Err(LearnerError::EmptyData("loss batch"));
    }
    if logits.nrows() != labels.len() {
        return Err(LearnerError::Shape(format!(
            "{} logit rows vs {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.ncols()) {
        return Err(LearnerError::LabelOutOfRange {
            label: bad,
            width: logits.ncols(),
        });
    }
    Ok(())
}

/// Mean cross-entropy over the batch.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64, LearnerError> {
    check_labels(logits, labels)?;
    let mut total = 0.0;
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        total -= row[label] - max - z.ln();
    }
    Ok(total / labels.len() as f64)
}

/// Cross-entropy value and gradient w.r.t. the logits.
pub fn cross_entropy_grad(
    logits: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>), LearnerError> {
    let loss = cross_entropy(logits, labels)?;
    let batch = labels.len() as f64;
    let mut grad = softmax(logits);
    for (i, &label) in labels.iter().enumerate() {
        grad[[i, label]] -= 1.0;
    }
    grad /= batch;
    Ok((loss, grad))
}

/// Temperature-softened distillation: `T^2 * mean_b KL(p_old || p_new)`,
/// both distributions taken at temperature `T` over the old-class columns.
pub fn distill_loss(
    old_logits: &Array2<f64>,
    new_logits: &Array2<f64>,
    temperature: f64,
) -> Result<f64, LearnerError> {
    distill_checks(old_logits, new_logits, temperature)?;
    let p_old = softmax(&(old_logits / temperature));
    let p_new = softmax(&(new_logits / temperature));
    let mut total = 0.0;
    for (po, pn) in p_old.rows().into_iter().zip(p_new.rows()) {
        for (a, b) in po.iter().zip(pn.iter()) {
            if *a > 0.0 {
                total += a * (a.ln() - b.ln());
            }
        }
    }
    Ok(temperature * temperature * total / old_logits.nrows() as f64)
}

/// Distillation value and gradient w.r.t. `new_logits`.
pub fn distill_grad(
    old_logits: &Array2<f64>,
    new_logits: &Array2<f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>), LearnerError> {
    let loss = distill_loss(old_logits, new_logits, temperature)?;
    let p_old = softmax(&(old_logits / temperature));
    let p_new = softmax(&(new_logits / temperature));
    // d/d_new of T^2 * KL is T * (p_new - p_old), batch-averaged.
    let grad = (&p_new - &p_old) * (temperature / old_logits.nrows() as f64);
    Ok((loss, grad))
}

fn distill_checks(
    old_logits: &Array2<f64>,
    new_logits: &Array2<f64>,
    temperature: f64,
) -> Result<(), LearnerError> {
    if temperature <= 0.0 {
        return Err(LearnerError::BadTemperature(temperature));
    }
    if old_logits.ncols() == 0 {
        return Err(LearnerError::EmptyOldClasses);
    }
    if old_logits.raw_dim() != new_logits.raw_dim() {
        return Err(LearnerError::Shape(format!(
            "old {:?} vs new {:?}",
            old_logits.shape(),
            new_logits.shape()
        )));
    }
    Ok(())
}

/// Classification plus distillation over the old-class columns. With no old
/// classes (`old_logits` has zero columns is invalid; pass `None`) this is
/// plain cross-entropy.
pub fn icarl_loss(
    logits: &Array2<f64>,
    labels: &[usize],
    old_logits: Option<&Array2<f64>>,
    temperature: f64,
    kd_weight: f64,
) -> Result<f64, LearnerError> {
    let ce = cross_entropy(logits, labels)?;
    match old_logits {
        None => Ok(ce),
        Some(old) => {
            let restricted = logits.slice(s![.., ..old.ncols()]).to_owned();
            Ok(ce + kd_weight * distill_loss(old, &restricted, temperature)?)
        }
    }
}

/// `icarl_loss` value and gradient w.r.t. the logits.
pub fn icarl_grad(
    logits: &Array2<f64>,
    labels: &[usize],
    old_logits: Option<&Array2<f64>>,
    temperature: f64,
    kd_weight: f64,
) -> Result<(f64, Array2<f64>), LearnerError> {
    let (ce, mut grad) = cross_entropy_grad(logits, labels)?;
    match old_logits {
        None => Ok((ce, grad)),
        Some(old) => {
            let restricted = logits.slice(s![.., ..old.ncols()]).to_owned();
            let (kd, kd_grad) = distill_grad(old, &restricted, temperature)?;
            grad.slice_mut(s![.., ..old.ncols()])
                .scaled_add(kd_weight, &kd_grad);
            Ok((ce + kd_weight * kd, grad))
        }
    }
}

/// Quadratic anchor `lambda/2 * sum_k F_k (theta_k - theta*_k)^2`.
pub fn ewc_penalty(
    theta: ArrayView1<f64>,
    theta_star: ArrayView1<f64>,
    fisher: ArrayView1<f64>,
    lambda: f64,
) -> Result<f64, LearnerError> {
    if theta.len() != theta_star.len() || theta.len() != fisher.len() {
        return Err(LearnerError::Shape(format!(
            "theta {}, theta* {}, fisher {}",
            theta.len(),
            theta_star.len(),
            fisher.len()
        )));
    }
    let mut total = 0.0;
    for ((t, ts), f) in theta.iter().zip(theta_star.iter()).zip(fisher.iter()) {
        let d = t - ts;
        total += f * d * d;
    }
    Ok(0.5 * lambda * total)
}

/// Gradient of [`ewc_penalty`] w.r.t. `theta`: `lambda * F * (theta - theta*)`.
pub fn ewc_penalty_grad(
    theta: ArrayView1<f64>,
    theta_star: ArrayView1<f64>,
    fisher: ArrayView1<f64>,
    lambda: f64,
) -> Result<Array1<f64>, LearnerError> {
    if theta.len() != theta_star.len() || theta.len() != fisher.len() {
        return Err(LearnerError::Shape(format!(
            "theta {}, theta* {}, fisher {}",
            theta.len(),
            theta_star.len(),
            fisher.len()
        )));
    }
    let mut grad = Array1::zeros(theta.len());
    for (i, ((t, ts), f)) in theta
        .iter()
        .zip(theta_star.iter())
        .zip(fisher.iter())
        .enumerate()
    {
        grad[i] = lambda * f * (t - ts);
    }
    Ok(grad)
}

fn pooled_pair(map: &Array4<f64>, sample: usize) -> (Array2<f64>, Array2<f64>) {
    let (_, c, h, w) = dims4(map);
    let mut pool_h = Array2::zeros((c, w));
    let mut pool_w = Array2::zeros((c, h));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = map[[sample, ci, y, x]];
                pool_h[[ci, x]] += v;
                pool_w[[ci, y]] += v;
            }
        }
    }
    (pool_h, pool_w)
}

fn normalized(v: &Array2<f64>) -> (Array2<f64>, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        (v / norm, norm)
    } else {
        (Array2::zeros(v.raw_dim()), 0.0)
    }
}

/// Pooled-output distillation: per layer, sum the maps along each spatial
/// axis, L2-normalize per sample, and accumulate squared distances between
/// the frozen and current pooled tensors. Batch mean over the sum of layers.
pub fn pod_loss(old_maps: &[Array4<f64>], new_maps: &[Array4<f64>]) -> Result<f64, LearnerError> {
    pod_checks(old_maps, new_maps)?;
    if old_maps.is_empty() {
        return Ok(0.0);
    }
    let batch = old_maps[0].shape()[0];
    let mut total = 0.0;
    for (old, new) in old_maps.iter().zip(new_maps) {
        for b in 0..batch {
            let (old_h, old_w) = pooled_pair(old, b);
            let (new_h, new_w) = pooled_pair(new, b);
            let (old_h, _) = normalized(&old_h);
            let (old_w, _) = normalized(&old_w);
            let (new_h, _) = normalized(&new_h);
            let (new_w, _) = normalized(&new_w);
            total += (&new_h - &old_h).mapv(|d| d * d).sum();
            total += (&new_w - &old_w).mapv(|d| d * d).sum();
        }
    }
    Ok(total / batch as f64)
}

/// [`pod_loss`] value and gradients w.r.t. each entry of `new_maps`.
pub fn pod_grad(
    old_maps: &[Array4<f64>],
    new_maps: &[Array4<f64>],
) -> Result<(f64, Vec<Array4<f64>>), LearnerError> {
    pod_checks(old_maps, new_maps)?;
    if old_maps.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let batch = old_maps[0].shape()[0];
    let scale = 1.0 / batch as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(new_maps.len());

    for (old, new) in old_maps.iter().zip(new_maps) {
        let (_, c, h, w) = dims4(new);
        let mut d_map = Array4::zeros(new.raw_dim());
        for b in 0..batch {
            let (old_h_raw, old_w_raw) = pooled_pair(old, b);
            let (new_h_raw, new_w_raw) = pooled_pair(new, b);
            let (old_h, _) = normalized(&old_h_raw);
            let (old_w, _) = normalized(&old_w_raw);
            let (new_h, nh_norm) = normalized(&new_h_raw);
            let (new_w, nw_norm) = normalized(&new_w_raw);

            total += (&new_h - &old_h).mapv(|d| d * d).sum();
            total += (&new_w - &old_w).mapv(|d| d * d).sum();

            // d ||u_hat - v_hat||^2 / d u = 2((u_hat - v_hat) -
            // u_hat * dot(u_hat, u_hat - v_hat)) / |u|; zero-norm pools get
            // zero gradient.
            let d_pool = |u_hat: &Array2<f64>, v_hat: &Array2<f64>, norm: f64| -> Array2<f64> {
                if norm <= 1e-12 {
                    return Array2::zeros(u_hat.raw_dim());
                }
                let diff = u_hat - v_hat;
                let inner = (&diff * u_hat).sum();
                (&diff - &(u_hat * inner)) * (2.0 / norm)
            };
            let dh = d_pool(&new_h, &old_h, nh_norm);
            let dw = d_pool(&new_w, &old_w, nw_norm);

            // Un-pool: every position that was summed receives the gradient.
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        d_map[[b, ci, y, x]] += (dh[[ci, x]] + dw[[ci, y]]) * scale;
                    }
                }
            }
        }
        grads.push(d_map);
    }
    Ok((total * scale, grads))
}

fn pod_checks(old_maps: &[Array4<f64>], new_maps: &[Array4<f64>]) -> Result<(), LearnerError> {
    if old_maps.len() != new_maps.len() {
        return Err(LearnerError::Shape(format!(
            "{} old layers vs {} new layers",
            old_maps.len(),
            new_maps.len()
        )));
    }
    for (i, (old, new)) in old_maps.iter().zip(new_maps).enumerate() {
        if old.shape() != new.shape() {
            return Err(LearnerError::Shape(format!(
                "layer {i}: old map {:?} vs new map {:?}",
                old.shape(),
                new.shape()
            )));
        }
    }
    Ok(())
}
