//! Euclidean projection onto a finitely generated convex cone.
//!
//! The projection of `t` onto `{ Σ a_i g_i : a ≥ 0 }` is `Gᵀa*` where `a*`
//! solves the nonnegative least-squares problem `min ‖Gᵀa − t‖²`. The solver
//! below is the Lawson–Hanson active-set method written against the Gram
//! matrix `K = G Gᵀ`, so one projection costs `O(D·d)` for `b = G t` plus
//! `O(D·p)` per active-set step, where `p ≤ min(D, d)` is the passive-set
//! size. The Cholesky factor of `K_PP` is grown one column at a time.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::GeometryError;
use crate::scalar::Scalar;

pub const DEFAULT_TOLERANCE: f64 = 1e-10;

/// Generators of a cone, one per row (`y_i · x_i`).
#[derive(Debug, Clone)]
pub struct ConeSpec<T: Scalar> {
    generators: Array2<T>,
    tolerance: T,
}

impl<T: Scalar> ConeSpec<T> {
    pub fn new(generators: Array2<T>, tolerance: T) -> Result<Self, GeometryError> {
        if generators.nrows() == 0 || generators.ncols() == 0 {
            return Err(GeometryError::Degenerate("cone needs at least one generator".into()));
        }
        if tolerance <= T::zero() || !tolerance.is_finite() {
            return Err(GeometryError::InvalidArgument("tolerance must be positive".into()));
        }
        for (i, row) in generators.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(GeometryError::NonFinite);
            }
            if row.iter().all(|v| v.is_zero()) {
                return Err(GeometryError::ZeroGenerator(i));
            }
        }
        Ok(Self { generators, tolerance })
    }

    pub fn with_default_tolerance(generators: Array2<T>) -> Result<Self, GeometryError> {
        Self::new(generators, T::of(DEFAULT_TOLERANCE))
    }

    pub fn generators(&self) -> &Array2<T> {
        &self.generators
    }

    pub fn n_generators(&self) -> usize {
        self.generators.nrows()
    }

    pub fn dim(&self) -> usize {
        self.generators.ncols()
    }

    pub fn tolerance(&self) -> T {
        self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct Projection<T: Scalar> {
    /// Nonnegative generator weights.
    pub coefficients: Array1<T>,
    pub point: Array1<T>,
    pub sq_norm: T,
    /// Largest KKT violation, relative to `max‖g_i‖·‖t‖`.
    pub kkt_residual: T,
    pub iterations: usize,
}

/// Reusable projector; precomputes the Gram matrix once per cone.
#[derive(Debug, Clone)]
pub struct ConeProjector<T: Scalar> {
    cone: ConeSpec<T>,
    gram: Array2<T>,
    max_gen_norm: T,
    max_iter: usize,
}

struct Solution<T> {
    coefficients: Array1<T>,
    /// `b − K a`
    gradient: Array1<T>,
    passive: Vec<usize>,
    iterations: usize,
    scale: T,
}

impl<T: Scalar> ConeProjector<T> {
    pub fn new(cone: ConeSpec<T>) -> Self {
        let g = cone.generators();
        let gram = g.dot(&g.t());
        let max_gen_norm = gram.diag().iter().fold(T::zero(), |m, &v| m.max(v)).sqrt();
        let max_iter = 10 * cone.n_generators();
        Self { cone, gram, max_gen_norm, max_iter }
    }

    pub fn cone(&self) -> &ConeSpec<T> {
        &self.cone
    }

    pub fn dim(&self) -> usize {
        self.cone.dim()
    }

    /// Full projection including the projected point.
    pub fn project(&self, t: ArrayView1<'_, T>) -> Result<Projection<T>, GeometryError> {
        let b = self.rhs(t)?;
        let sol = self.solve(&b, t_norm(t))?;
        let point = self.cone.generators().t().dot(&sol.coefficients);
        let sq_norm = point.dot(&point);
        let kkt_residual = self.kkt_residual(&sol);
        Ok(Projection { coefficients: sol.coefficients, point, sq_norm, kkt_residual, iterations: sol.iterations })
    }

    /// `‖Π(t)‖²` without forming the projected point.
    pub fn project_sq_norm(&self, t: ArrayView1<'_, T>) -> Result<T, GeometryError> {
        let b = self.rhs(t)?;
        let sol = self.solve(&b, t_norm(t))?;
        // At the optimum K a = b − w, so aᵀKa = a·(b − w).
        let v = sol
            .passive
            .iter()
            .map(|&i| sol.coefficients[i] * (b[i] - sol.gradient[i]))
            .fold(T::zero(), |acc, x| acc + x);
        Ok(v.max(T::zero()))
    }

    fn rhs(&self, t: ArrayView1<'_, T>) -> Result<Array1<T>, GeometryError> {
        if t.len() != self.cone.dim() {
            return Err(GeometryError::DimensionMismatch { expected: self.cone.dim(), got: t.len() });
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(self.cone.generators().dot(&t))
    }

    fn kkt_residual(&self, sol: &Solution<T>) -> T {
        if sol.scale.is_zero() {
            return T::zero();
        }
        let mut worst = T::zero();
        for (i, &w) in sol.gradient.iter().enumerate() {
            let v = if sol.coefficients[i] > T::zero() { w.abs() } else { w.max(T::zero()) };
            worst = worst.max(v);
        }
        worst / sol.scale
    }

    fn solve(&self, b: &Array1<T>, t_norm: T) -> Result<Solution<T>, GeometryError> {
        let n = b.len();
        let k = &self.gram;
        let scale = self.max_gen_norm * t_norm;
        let tol = self.cone.tolerance().max(T::epsilon() * T::of(1e3)) * scale;
        let pivot_floor = T::epsilon() * T::of(1e4);

        let mut a = Array1::<T>::zeros(n);
        let mut w = b.clone();
        let mut passive: Vec<usize> = Vec::new();
        let mut in_passive = vec![false; n];
        let mut rejected = vec![false; n];
        let mut chol = Cholesky::default();
        let mut iterations = 0;

        loop {
            let mut best: Option<(usize, T)> = None;
            for j in 0..n {
                if !in_passive[j] && !rejected[j] && best.is_none_or(|(_, v)| w[j] > v) {
                    best = Some((j, w[j]));
                }
            }
            let Some((j, wj)) = best else { break };
            if wj <= tol {
                break;
            }
            iterations += 1;
            if iterations > self.max_iter {
                return Err(GeometryError::NonConvergence { iterations: self.max_iter });
            }
            if !chol.push(k, &passive, j, pivot_floor) {
                // Numerically inside span of the passive set.
                rejected[j] = true;
                continue;
            }
            passive.push(j);
            in_passive[j] = true;

            let mut first = true;
            let mut undone = false;
            loop {
                let rhs: Vec<T> = passive.iter().map(|&i| b[i]).collect();
                let z = chol.solve(&rhs);
                if z.iter().all(|&v| v > T::zero()) {
                    for (&i, &v) in passive.iter().zip(&z) {
                        a[i] = v;
                    }
                    break;
                }
                if first && z[z.len() - 1] <= T::zero() {
                    // The entering column did not improve the fit; undo it.
                    passive.pop();
                    in_passive[j] = false;
                    rejected[j] = true;
                    chol.pop();
                    undone = true;
                    break;
                }
                first = false;
                // Step towards z until the first passive weight reaches zero.
                let mut step = T::one();
                let mut blocking = None;
                for (&i, &zi) in passive.iter().zip(&z) {
                    if zi <= T::zero() {
                        let denom = a[i] - zi;
                        let s = if denom > T::zero() { a[i] / denom } else { T::zero() };
                        if blocking.is_none() || s < step {
                            step = s;
                            blocking = Some(i);
                        }
                    }
                }
                for (&i, &zi) in passive.iter().zip(&z) {
                    a[i] = a[i] + step * (zi - a[i]);
                }
                if let Some(i) = blocking {
                    a[i] = T::zero();
                }
                passive.retain(|&i| a[i] > T::zero());
                for i in 0..n {
                    if in_passive[i] && !passive.contains(&i) {
                        in_passive[i] = false;
                        a[i] = T::zero();
                    }
                }
                let (rebuilt, kept) = Cholesky::build(k, &passive, pivot_floor);
                for &i in passive.iter().filter(|i| !kept.contains(i)) {
                    in_passive[i] = false;
                    a[i] = T::zero();
                }
                chol = rebuilt;
                passive = kept;
                if passive.is_empty() {
                    break;
                }
                iterations += 1;
                if iterations > self.max_iter {
                    return Err(GeometryError::NonConvergence { iterations: self.max_iter });
                }
            }

            if undone {
                continue;
            }
            // w = b − K a over the passive set.
            for i in 0..n {
                let mut s = b[i];
                for &p in &passive {
                    s = s - k[[i, p]] * a[p];
                }
                w[i] = s;
            }
            rejected.iter_mut().for_each(|r| *r = false);
        }

        Ok(Solution { coefficients: a, gradient: w, passive, iterations, scale })
    }
}

fn t_norm<T: Scalar>(t: ArrayView1<'_, T>) -> T {
    t.dot(&t).sqrt()
}

/// Lower-triangular factor of `K_PP`, rows stored ragged.
#[derive(Default)]
struct Cholesky<T> {
    rows: Vec<Vec<T>>,
}

impl<T: Scalar> Cholesky<T> {
    /// Refactors `K_PP`; columns that became numerically dependent are dropped.
    fn build(k: &Array2<T>, passive: &[usize], floor: T) -> (Self, Vec<usize>) {
        let mut c = Self::default();
        let mut kept = Vec::with_capacity(passive.len());
        for &j in passive {
            if c.push(k, &kept, j, floor * T::of(1e-2)) {
                kept.push(j);
            }
        }
        (c, kept)
    }

    /// Appends column `j`; returns false if its pivot is below `floor·K_jj`.
    fn push(&mut self, k: &Array2<T>, passive: &[usize], j: usize, floor: T) -> bool {
        let m = self.rows.len();
        let mut l = Vec::with_capacity(m + 1);
        for r in 0..m {
            let mut s = k[[passive[r], j]];
            for c in 0..r {
                s = s - self.rows[r][c] * l[c];
            }
            l.push(s / self.rows[r][r]);
        }
        let kjj = k[[j, j]];
        let pivot = kjj - l.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b);
        if !(pivot > floor * kjj) {
            return false;
        }
        l.push(pivot.sqrt());
        self.rows.push(l);
        true
    }

    fn pop(&mut self) {
        self.rows.pop();
    }

    fn solve(&self, rhs: &[T]) -> Vec<T> {
        let m = self.rows.len();
        let mut y = vec![T::zero(); m];
        for r in 0..m {
            let mut s = rhs[r];
            for c in 0..r {
                s = s - self.rows[r][c] * y[c];
            }
            y[r] = s / self.rows[r][r];
        }
        for r in (0..m).rev() {
            let mut s = y[r];
            for c in r + 1..m {
                s = s - self.rows[c][r] * y[c];
            }
            y[r] = s / self.rows[r][r];
        }
        y
    }
}

/// Convenience wrapper for one-off projections.
pub fn project_cone<T: Scalar>(t: ArrayView1<'_, T>, cone: &ConeSpec<T>) -> Result<Projection<T>, GeometryError> {
    ConeProjector::new(cone.clone()).project(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn cone(rows: Array2<f64>) -> ConeSpec<f64> {
        ConeSpec::with_default_tolerance(rows).unwrap()
    }

    fn close(a: &Array1<f64>, b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn ray_projection() {
        let c = cone(array![[1.0, 0.0]]);
        assert!(close(&project_cone(array![2.0, 3.0].view(), &c).unwrap().point, &[2.0, 0.0], 1e-12));
        assert!(close(&project_cone(array![-2.0, 3.0].view(), &c).unwrap().point, &[0.0, 0.0], 1e-12));
    }

    #[test]
    fn orthant_clamps() {
        let c = cone(array![[1.0, 0.0], [0.0, 1.0]]);
        let p = project_cone(array![-1.0, 2.0].view(), &c).unwrap();
        assert!(close(&p.point, &[0.0, 2.0], 1e-12));
        assert!(p.kkt_residual <= 1e-10);
    }

    #[test]
    fn line_and_full_space() {
        let line = cone(array![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        let p = project_cone(array![-3.0, 1.0, 2.0].view(), &line).unwrap();
        assert!(close(&p.point, &[-3.0, 0.0, 0.0], 1e-12));

        let mut rows = Array2::zeros((6, 3));
        for i in 0..3 {
            rows[[2 * i, i]] = 1.0;
            rows[[2 * i + 1, i]] = -1.0;
        }
        let full = cone(rows);
        let t = array![0.3, -1.7, 2.2];
        let p = project_cone(t.view(), &full).unwrap();
        assert!(close(&p.point, t.as_slice().unwrap(), 1e-12));
    }

    #[test]
    fn redundant_generators() {
        // Many copies and positive combinations of two directions.
        let c = cone(array![[1.0, 0.0], [2.0, 0.0], [1.0, 1.0], [0.0, 1.0], [3.0, 3.0], [0.0, 0.5]]);
        let p = project_cone(array![-1.0, 2.0].view(), &c).unwrap();
        assert!(close(&p.point, &[0.0, 2.0], 1e-10));
        let p = project_cone(array![5.0, 1.0].view(), &c).unwrap();
        assert!(close(&p.point, &[5.0, 1.0], 1e-10));
    }

    #[test]
    fn sq_norm_fast_path_agrees() {
        let c = cone(array![[1.0, 0.2, -0.3], [0.1, 1.0, 0.4], [-0.5, 0.3, 1.0], [0.7, -0.6, 0.2]]);
        let proj = ConeProjector::new(c);
        for t in [array![0.4, -1.0, 2.0], array![-1.0, -1.0, -1.0], array![3.0, 0.1, 0.0]] {
            let full = proj.project(t.view()).unwrap();
            let fast = proj.project_sq_norm(t.view()).unwrap();
            assert!((full.sq_norm - fast).abs() < 1e-10, "{} vs {}", full.sq_norm, fast);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            ConeSpec::with_default_tolerance(array![[0.0, 0.0], [1.0, 0.0]]),
            Err(GeometryError::ZeroGenerator(0))
        ));
        let c = cone(array![[1.0, 0.0]]);
        assert!(matches!(
            project_cone(array![1.0].view(), &c),
            Err(GeometryError::DimensionMismatch { .. })
        ));
        assert!(matches!(project_cone(array![f64::NAN, 0.0].view(), &c), Err(GeometryError::NonFinite)));
    }

    #[test]
    fn works_in_single_precision() {
        let c = ConeSpec::new(array![[1.0f32, 0.0], [0.0, 1.0]], 1e-6).unwrap();
        let p = project_cone(array![-1.0f32, 2.0].view(), &c).unwrap();
        assert!((p.point[1] - 2.0).abs() < 1e-6 && p.point[0].abs() < 1e-6);
    }

    fn gen_cone() -> impl Strategy<Value = (Array2<f64>, Vec<f64>)> {
        (1usize..12, 1usize..6).prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(-3.0f64..3.0, n * d).prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap()),
                prop::collection::vec(-3.0f64..3.0, d),
            )
        })
    }

    proptest! {
        #[test]
        fn projection_properties((g, t) in gen_cone()) {
            prop_assume!(g.axis_iter(Axis(0)).all(|r| r.dot(&r) > 1e-6));
            let proj = ConeProjector::new(cone(g));
            let t = Array1::from(t);
            let p = proj.project(t.view()).unwrap();
            prop_assert!(p.coefficients.iter().all(|&a| a >= 0.0));
            prop_assert!(p.kkt_residual <= 1e-8, "kkt {}", p.kkt_residual);
            // Non-expansive and obtuse.
            prop_assert!(p.sq_norm <= t.dot(&t) + 1e-9);
            let r = &t - &p.point;
            prop_assert!(p.point.dot(&r).abs() <= 1e-8 * (1.0 + t.dot(&t)));
            // Idempotent.
            let again = proj.project(p.point.view()).unwrap();
            let diff = &again.point - &p.point;
            prop_assert!(diff.dot(&diff).sqrt() <= 1e-8 * (1.0 + t.dot(&t).sqrt()));
        }
    }
}
