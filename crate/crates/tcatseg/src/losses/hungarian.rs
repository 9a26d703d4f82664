//! Minimum-cost rectangular assignment.
//!
//! The core is the classic O(n^3) potential/augmenting-path algorithm on a
//! square matrix; rectangular inputs are padded with a large uniform
//! sentinel, and sentinel pairs are stripped from the result. Among
//! equal-cost optima the lexicographically smallest pair list is returned,
//! established by a greedy refinement pass that re-solves reduced problems.

use crate::error::{Error, Result};

/// An optimal pairing: `(prediction index, ground-truth index)` pairs with
/// unique indices on both sides, sorted by prediction index, plus the total
/// cost accumulated in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Square assignment via potentials and shortest augmenting paths.
/// Returns col -> row matching (1-based internally, 0 is the virtual col).
fn solve_square(a: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = a[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    p
}

/// Solves the rectangular subproblem over the listed rows and columns
/// (global indices). Returns pairs sorted by row and the row-order cost sum.
fn solve_rect(
    cost: &dyn Fn(usize, usize) -> f64,
    rows: &[usize],
    cols: &[usize],
    sentinel: f64,
) -> (Vec<(usize, usize)>, f64) {
    let (r, c) = (rows.len(), cols.len());
    if r == 0 || c == 0 {
        return (Vec::new(), 0.0);
    }
    let n = r.max(c);
    let mut a = vec![sentinel; n * n];
    for (ri, &gr) in rows.iter().enumerate() {
        for (ci, &gc) in cols.iter().enumerate() {
            a[ri * n + ci] = cost(gr, gc);
        }
    }
    let p = solve_square(&a, n);
    let mut pairs = Vec::with_capacity(r.min(c));
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i - 1 < r && j - 1 < c {
            pairs.push((rows[i - 1], cols[j - 1]));
        }
    }
    pairs.sort_by_key(|&(i, _)| i);
    let total = pairs.iter().map(|&(i, j)| cost(i, j)).sum();
    (pairs, total)
}

/// Minimum-total-cost assignment of `min(r, c)` pairs; among equal-cost
/// optima the lexicographically smallest pair list is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let r = cost.len();
    if r == 0 || cost[0].is_empty() {
        return Err(Error::Validation(
            "hungarian: cost matrix must have at least one row and column".to_string(),
        ));
    }
    let c = cost[0].len();
    let mut max_abs = 0.0f64;
    for row in cost {
        if row.len() != c {
            return Err(Error::Validation("hungarian: ragged cost matrix".to_string()));
        }
        for &v in row {
            if !v.is_finite() {
                return Err(Error::Validation(format!("hungarian: non-finite cost {v}")));
            }
            max_abs = max_abs.max(v.abs());
        }
    }
    let sentinel = 1e6 * max_abs.max(1.0);
    let cost_fn = |i: usize, j: usize| cost[i][j];

    let all_rows: Vec<usize> = (0..r).collect();
    let all_cols: Vec<usize> = (0..c).collect();
    let (mut reference, base_total) = solve_rect(&cost_fn, &all_rows, &all_cols, sentinel);
    let k = reference.len();
    let tol = 1e-9 * (1.0 + base_total.abs());

    // Greedy lexicographic refinement: at each position, accept the
    // smallest (row, col) candidate below the reference pair that still
    // completes to an assignment of the same total cost.
    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(k);
    let mut fixed_sum = 0.0f64;
    let mut used_cols = vec![false; c];
    let mut row_floor = 0usize;
    for pos in 0..k {
        let (ref_i, ref_j) = reference[pos];
        let mut accepted: Option<((usize, usize), Vec<(usize, usize)>)> = None;
        'candidates: for i in row_floor..=ref_i {
            let j_limit = if i == ref_i { ref_j } else { c };
            for j in 0..j_limit {
                if used_cols[j] {
                    continue;
                }
                // Remaining rows must still be able to host the suffix.
                let rows_left = r - i - 1;
                let pairs_left = k - pos - 1;
                if rows_left < pairs_left {
                    continue;
                }
                let sub_rows: Vec<usize> = (i + 1..r).collect();
                let sub_cols: Vec<usize> =
                    (0..c).filter(|&cc| !used_cols[cc] && cc != j).collect();
                let (sub_pairs, sub_total) = solve_rect(&cost_fn, &sub_rows, &sub_cols, sentinel);
                if sub_pairs.len() != pairs_left {
                    continue;
                }
                let cand_total = fixed_sum + cost[i][j] + sub_total;
                if (cand_total - base_total).abs() <= tol {
                    accepted = Some(((i, j), sub_pairs));
                    break 'candidates;
                }
            }
        }
        match accepted {
            Some(((i, j), sub_pairs)) => {
                fixed.push((i, j));
                fixed_sum += cost[i][j];
                used_cols[j] = true;
                row_floor = i + 1;
                reference = {
                    let mut v = fixed.clone();
                    v.extend(sub_pairs);
                    v
                };
            }
            None => {
                // The reference pair itself is the smallest feasible choice.
                fixed.push((ref_i, ref_j));
                fixed_sum += cost[ref_i][ref_j];
                used_cols[ref_j] = true;
                row_floor = ref_i + 1;
            }
        }
    }

    let total_cost = fixed.iter().map(|&(i, j)| cost[i][j]).sum();
    Ok(Assignment {
        pairs: fixed,
        total_cost,
    })
}
