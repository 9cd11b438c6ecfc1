//! Shared oracles for the integration and acceptance suites. Everything in
//! here is written independently of the library's solver paths: the QP
//! reference enumerates active sets with its own Gaussian elimination, and
//! the herding oracle does exhaustive lexicographic search.

#![allow(dead_code)]

use ndarray::{Array1, Array2};

/// Plain Gaussian elimination with partial pivoting, local to the oracles.
pub fn gauss_solve(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        let pivot_row = (col..n).max_by(|&i, &j| {
            m[[i, col]]
                .abs()
                .partial_cmp(&m[[j, col]].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if m[[pivot_row, col]].abs() < 1e-12 {
            return None;
        }
        if pivot_row != col {
            for k in 0..n {
                m.swap([col, k], [pivot_row, k]);
            }
            rhs.swap(col, pivot_row);
        }
        for row in col + 1..n {
            let f = m[[row, col]] / m[[col, col]];
            for k in col..n {
                m[[row, k]] -= f * m[[col, k]];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = Array1::zeros(n);
    for row in (0..n).rev() {
        let mut s = rhs[row];
        for k in row + 1..n {
            s -= m[[row, k]] * x[k];
        }
        x[row] = s / m[[row, row]];
    }
    Some(x)
}

/// Dense QP reference for `min 1/2 ||v - g||^2 s.t. G v >= margin` by
/// exhaustive active-set enumeration: for every subset of constraints,
/// solve the equality-constrained problem and keep the best KKT point.
pub fn qp_reference(g: &Array1<f64>, memories: &[Array1<f64>], margin: f64) -> Array1<f64> {
    let k = memories.len();
    let mut best: Option<(f64, Array1<f64>)> = None;
    for mask in 0..(1u32 << k) {
        let active: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let candidate = if active.is_empty() {
            g.clone()
        } else {
            let s = active.len();
            let mut gram = Array2::zeros((s, s));
            let mut rhs = Array1::zeros(s);
            for (a, &i) in active.iter().enumerate() {
                for (b, &j) in active.iter().enumerate() {
                    gram[[a, b]] = memories[i].dot(&memories[j]);
                }
                rhs[a] = margin - g.dot(&memories[i]);
            }
            let Some(lambda) = gauss_solve(&gram, &rhs) else {
                continue;
            };
            // Dual feasibility: multipliers of active constraints >= 0.
            if lambda.iter().any(|&l| l < -1e-9) {
                continue;
            }
            let mut v = g.clone();
            for (a, &i) in active.iter().enumerate() {
                v.scaled_add(lambda[a], &memories[i]);
            }
            v
        };
        // Primal feasibility over all constraints.
        let scale: f64 = 1e-9 * (1.0 + g.dot(g).sqrt());
        if memories
            .iter()
            .any(|m| candidate.dot(m) < margin - scale * (1.0 + m.dot(m).sqrt()))
        {
            continue;
        }
        let diff = &candidate - g;
        let objective = diff.dot(&diff);
        if best.as_ref().is_none_or(|(b, _)| objective < *b) {
            best = Some((objective, candidate));
        }
    }
    best.expect("the QP is feasible (v = large positive combination works)")
        .1
}

/// Exhaustive herding oracle: the greedy selection equals the lexicographic
/// minimum over all ordered index sequences of the per-step distance vector
/// (ties broken by the indices themselves).
pub fn herding_oracle(features: &Array2<f64>, m: usize) -> Vec<usize> {
    let n = features.nrows();
    let target = features.mean_axis(ndarray::Axis(0)).expect("n > 0");

    // Step distances along a sequence prefix.
    let step_distance = |chosen: &[usize]| -> f64 {
        let mut mean = Array1::<f64>::zeros(features.ncols());
        for &i in chosen {
            mean += &features.row(i);
        }
        mean /= chosen.len() as f64;
        let diff = &mean - &target;
        diff.dot(&diff)
    };

    let mut best: Option<(StepKey, Vec<usize>)> = None;
    let mut sequence = Vec::with_capacity(m);
    let mut used = vec![false; n];

    fn dfs(
        n: usize,
        m: usize,
        sequence: &mut Vec<usize>,
        used: &mut Vec<bool>,
        key: &mut StepKey,
        step_distance: &dyn Fn(&[usize]) -> f64,
        best: &mut Option<(StepKey, Vec<usize>)>,
    ) {
        if sequence.len() == m {
            let better = match best {
                None => true,
                Some((best_key, _)) => lex_less(key, best_key),
            };
            if better {
                *best = Some((key.clone(), sequence.clone()));
            }
            return;
        }
        for i in 0..n {
            if used[i] {
                continue;
            }
            used[i] = true;
            sequence.push(i);
            key.push((step_distance(sequence), i));
            dfs(n, m, sequence, used, key, step_distance, best);
            key.pop();
            sequence.pop();
            used[i] = false;
        }
    }

    let mut key = Vec::with_capacity(m);
    dfs(
        n,
        m,
        &mut sequence,
        &mut used,
        &mut key,
        &step_distance,
        &mut best,
    );
    best.expect("m <= n").1
}

/// Per-step `(distance, index)` pairs along a selection sequence.
type StepKey = Vec<(f64, usize)>;

fn lex_less(a: &[(f64, usize)], b: &[(f64, usize)]) -> bool {
    for ((da, ia), (db, ib)) in a.iter().zip(b.iter()) {
        if da < db {
            return true;
        }
        if da > db {
            return false;
        }
        if ia < ib {
            return true;
        }
        if ia > ib {
            return false;
        }
    }
    false
}

/// Relative closeness used by the finite-difference sweeps.
pub fn close_rel(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-6)
}
