//! Gradient projection against past-task memory gradients.
//!
//! A proposed update `g` is kept only if it does not point against any past
//! task's gradient; otherwise it is replaced by the closest vector (in L2)
//! whose inner product with every memory gradient clears the margin. The
//! projection solves the dual of that QP by cyclic coordinate descent over
//! the nonnegative multipliers; with one constraint it reduces to the
//! classic hyperplane projection.

use ndarray::{Array1, Array2};

use super::LearnerError;

const MAX_SWEEPS: usize = 50_000;

/// Projects `g` so that `g_proj . g_k >= margin` for every memory gradient.
///
/// Feasible inputs are returned bit-identical. The result satisfies every
/// constraint within `1e-6 * |g| * |g_k|`.
pub fn gem_project(
    g: &Array1<f64>,
    memories: &[Array1<f64>],
    margin: f64,
) -> Result<Array1<f64>, LearnerError> {
    for (k, mem) in memories.iter().enumerate() {
        if mem.len() != g.len() {
            return Err(LearnerError::Shape(format!(
                "memory gradient {k} has dim {}, update has {}",
                mem.len(),
                g.len()
            )));
        }
    }
    // Zero memory gradients constrain nothing.
    let active: Vec<&Array1<f64>> = memories
        .iter()
        .filter(|m| m.iter().any(|v| *v != 0.0))
        .collect();
    if active.is_empty() || active.iter().all(|m| g.dot(*m) >= margin) {
        return Ok(g.clone());
    }

    let k = active.len();
    let mut gram = Array2::zeros((k, k));
    let mut lin = Array1::zeros(k);
    for i in 0..k {
        for j in 0..k {
            gram[[i, j]] = active[i].dot(active[j]);
        }
        lin[i] = g.dot(active[i]) - margin;
    }

    // Dual: minimize 1/2 l' M l + c' l over l >= 0, with the projected
    // gradient recovered as g + G' l. Convergence is judged by the KKT
    // residual, which keeps zigzagging iterates on ill-conditioned duals
    // from being mistaken for stagnation.
    let scale = lin
        .iter()
        .chain(gram.iter())
        .fold(1.0f64, |a, v| a.max(v.abs()));
    let kkt_residual = |lambda: &Array1<f64>| -> f64 {
        (0..k)
            .map(|i| {
                let slope = gram.row(i).dot(lambda) + lin[i];
                if lambda[i] > 0.0 {
                    slope.abs()
                } else {
                    (-slope).max(0.0)
                }
            })
            .fold(0.0f64, f64::max)
    };

    let mut lambda = Array1::<f64>::zeros(k);
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        for i in 0..k {
            let slope = gram.row(i).dot(&lambda) + lin[i];
            lambda[i] = (lambda[i] - slope / gram[[i, i]]).max(0.0);
        }
        residual = kkt_residual(&lambda);
        if residual <= 1e-11 * scale {
            break;
        }
    }
    if residual > 1e-6 * scale {
        return Err(LearnerError::QpNonConvergence { residual });
    }

    let mut projected = g.clone();
    for (l, mem) in lambda.iter().zip(&active) {
        if *l > 0.0 {
            projected.scaled_add(*l, *mem);
        }
    }

    let g_norm = g.dot(g).sqrt();
    for (idx, mem) in active.iter().enumerate() {
        let tolerance = 1e-6 * g_norm * mem.dot(*mem).sqrt();
        let violation = margin - projected.dot(*mem);
        if violation > tolerance {
            return Err(LearnerError::ConstraintViolated {
                index: idx,
                violation,
            });
        }
    }
    Ok(projected)
}
