//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use cotgeo::logic::{LogicTree, Op};
use cotgeo::store::AttentionRows;

/// Truth table of each operator indexed by `2a + b`.
pub fn op_table(op: Op) -> [bool; 4] {
    match op {
        Op::And => [false, false, false, true],
        Op::Or => [false, true, true, true],
        Op::Xor => [false, true, true, false],
    }
}

/// Node values by level-order sweep over the leaves, in ID order.
pub fn truth_oracle(tree: &LogicTree) -> Vec<bool> {
    let ops = tree.ops();
    let mut level: Vec<bool> = tree.leaves.clone();
    let mut out = Vec::new();
    let mut next_id = 0usize;
    while level.len() > 1 {
        let vals: Vec<bool> = level
            .chunks(2)
            .enumerate()
            .map(|(i, pair)| op_table(ops[next_id + i])[2 * pair[0] as usize + pair[1] as usize])
            .collect();
        next_id += vals.len();
        out.extend_from_slice(&vals);
        level = vals;
    }
    out
}

/// Radical inverse of `i` in `base`.
pub fn halton(mut i: usize, base: usize) -> f64 {
    let (mut f, mut r) = (1.0, 0.0);
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Inverse standard normal CDF by Acklam's rational approximation
/// (relative error below 1.2e-9).
#[allow(clippy::excessive_precision)]
pub fn norm_inv(p: f64) -> f64 {
    const A: [f64; 6] = [-3.969683028665376e1, 2.209460984245205e2, -2.759285104469687e2, 1.383577518672690e2, -3.066479806614716e1, 2.506628277459239];
    const B: [f64; 5] = [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] = [-7.784894002430293e-3, -3.223964580411365e-1, -2.400758277161838, -2.549732539343734, 4.374664141464968, 2.938163982698783];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let pl = 0.02425;
    if p < pl {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - pl {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -norm_inv(1.0 - p)
    }
}

/// Quasi-random standard normal points in up to three dimensions.
pub fn halton_normals(n: usize, d: usize) -> Array2<f64> {
    const BASES: [usize; 3] = [2, 3, 5];
    assert!(d <= 3);
    Array2::from_shape_fn((n, d), |(i, k)| norm_inv(halton(i + 1, BASES[k])))
}

/// `‖Π_V(t)‖²` by coarse-to-fine grid search over non-negative coefficients:
/// minimizes `‖t − Gᵀc‖²` on a lattice that is recentred on the best point
/// and halved in spacing each round.
pub fn grid_projection_sq(gens: ArrayView2<f64>, t: ArrayView1<f64>, c_max: f64) -> f64 {
    let k = gens.nrows();
    let per_axis = 9usize;
    let gt: Vec<f64> = (0..k).map(|i| gens.row(i).dot(&t)).collect();
    let gram: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| gens.row(i).dot(&gens.row(j))).collect()).collect();
    let tt = t.dot(&t);
    let obj = |c: &[f64]| {
        let mut v = tt;
        for i in 0..k {
            v -= 2.0 * c[i] * gt[i];
            for j in 0..k {
                v += c[i] * gram[i][j] * c[j];
            }
        }
        v
    };
    let mut center = vec![0.0; k];
    let mut step = c_max / (per_axis - 1) as f64;
    let mut best = obj(&center);
    let mut lo = vec![0.0; k];
    for _ in 0..32 {
        let mut idx = vec![0usize; k];
        loop {
            let c: Vec<f64> = (0..k).map(|i| lo[i] + idx[i] as f64 * step).collect();
            if c.iter().all(|&x| x >= 0.0) {
                let v = obj(&c);
                if v < best {
                    best = v;
                    center = c;
                }
            }
            let mut p = 0;
            while p < k {
                idx[p] += 1;
                if idx[p] < per_axis {
                    break;
                }
                idx[p] = 0;
                p += 1;
            }
            if p == k {
                break;
            }
        }
        step /= 2.0;
        let half = (per_axis / 2) as f64 * step;
        lo = center.iter().map(|&c| (c - half).max(0.0)).collect();
    }
    tt - best
}

/// Hard-margin SVM by active-set enumeration: for every subset `S` of at
/// most `d + 1` points, solves the KKT equalities `y_i(w·x_i + b) = 1`,
/// `w = Σ α_i y_i x_i`, `Σ α_i y_i = 0` and keeps the feasible solution of
/// smallest `‖w‖`. Returns `(w, b)`.
pub fn qp_oracle(x: ArrayView2<f64>, y: &[f64]) -> Option<(Array1<f64>, f64)> {
    let (n, d) = x.dim();
    let mut best: Option<(Array1<f64>, f64, f64)> = None;
    for mask in 1u32..(1 << n) {
        let s: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
        if s.len() < 2 || s.len() > d + 1 {
            continue;
        }
        if !s.iter().any(|&i| y[i] > 0.0) || !s.iter().any(|&i| y[i] < 0.0) {
            continue;
        }
        let m = s.len();
        // Unknowns: α_S (m) and b.
        let mut a = DMatrix::<f64>::zeros(m + 1, m + 1);
        let mut rhs = DVector::<f64>::zeros(m + 1);
        for (r, &i) in s.iter().enumerate() {
            for (c, &j) in s.iter().enumerate() {
                a[(r, c)] = y[i] * y[j] * x.row(i).dot(&x.row(j));
            }
            a[(r, m)] = y[i];
            rhs[r] = 1.0;
            a[(m, r)] = y[i];
        }
        let Some(sol) = a.clone().lu().solve(&rhs) else { continue };
        if (&a * &sol - &rhs).norm() > 1e-9 || sol.iter().take(m).any(|&v| v < -1e-12) {
            continue;
        }
        let mut w = Array1::zeros(d);
        for (r, &i) in s.iter().enumerate() {
            w.scaled_add(sol[r] * y[i], &x.row(i));
        }
        let b = sol[m];
        if (0..n).any(|i| y[i] * (w.dot(&x.row(i)) + b) < 1.0 - 1e-9) {
            continue;
        }
        let norm = w.dot(&w).sqrt();
        if best.as_ref().is_none_or(|(_, _, bn)| norm < *bn - 1e-12) {
            best = Some((w, b, norm));
        }
    }
    best.map(|(w, b, _)| (w, b))
}

/// Max attention by a plain loop over every stored coordinate.
pub fn attention_loop_oracle(rows: &AttentionRows, sources: &[usize], targets: &[usize], layers: &[usize], n_heads: usize) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for &l in layers {
        for h in 0..n_heads {
            for &i in targets {
                let row = rows.row(l, h, i).expect("row stored");
                for &j in sources {
                    best = best.max(row[j] as f64);
                }
            }
        }
    }
    best
}

/// Eigenvalues of the sample covariance of `x` (rows are points).
pub fn covariance_eigenvalues(x: ArrayView2<f64>) -> Vec<f64> {
    let (n, d) = x.dim();
    let m = DMatrix::from_fn(n, d, |i, j| x[[i, j]]);
    let mean = m.row_mean();
    let c = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = c.transpose() * &c / (n as f64 - 1.0);
    cov.symmetric_eigen().eigenvalues.iter().copied().collect()
}

/// Spearman correlation without ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}
