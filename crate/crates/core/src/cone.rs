//! Euclidean projection onto polyhedral cones `{u : G u >= 0}`.
//!
//! By Moreau's decomposition `u = P_K(u) + P_{K°}(u)` with the polar cone
//! `K° = {-G^T l : l >= 0}`, so the projection reduces to the nonnegative
//! least-squares problem `min_{l >= 0} |G^T l + u|`, solved here with the
//! Lawson-Hanson active-set method.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::linalg::cholesky_solve;
use crate::scalar::Scalar;

/// Nonnegative least squares `min_{x >= 0} |E x - f|` (Lawson-Hanson).
pub fn nnls<T: Scalar>(e: ArrayView2<T>, f: ArrayView1<T>) -> Array1<T> {
    let q = e.ncols();
    let gram = e.t().dot(&e);
    let etf = e.t().dot(&f);
    nnls_gram(gram.view(), etf.view(), q)
}

fn nnls_gram<T: Scalar>(gram: ArrayView2<T>, etf: ArrayView1<T>, q: usize) -> Array1<T> {
    let mut x = Array1::<T>::zeros(q);
    let mut passive = vec![false; q];
    let scale = (0..q).map(|j| gram[[j, j]]).fold(T::zero(), T::max).max(T::one());
    let tol = T::of(1e-13) * scale * etf.iter().fold(T::one(), |a, &b| a.max(b.abs()));
    let dual = |x: &Array1<T>| -> Array1<T> { &etf - &gram.dot(x) };
    let max_outer = 3 * q + 10;
    for _ in 0..max_outer {
        let w = dual(&x);
        let mut best = None;
        let mut best_val = tol;
        for j in 0..q {
            if !passive[j] && w[j] > best_val {
                best_val = w[j];
                best = Some(j);
            }
        }
        let Some(j) = best else { break };
        passive[j] = true;
        let mut stalled = false;
        for _inner in 0..(3 * q + 10) {
            let idx: Vec<usize> = (0..q).filter(|&k| passive[k]).collect();
            let sol = solve_passive(gram, etf, &idx);
            let Some(sol) = sol else {
                // Dependent column entered; drop it and stop growing along it.
                passive[j] = false;
                stalled = true;
                break;
            };
            if sol.iter().all(|&v| v > T::zero()) {
                for (k, &col) in idx.iter().enumerate() {
                    x[col] = sol[k];
                }
                break;
            }
            let mut alpha = T::one();
            for (k, &col) in idx.iter().enumerate() {
                if sol[k] <= T::zero() {
                    let denom = x[col] - sol[k];
                    if denom > T::zero() {
                        alpha = alpha.min(x[col] / denom);
                    }
                }
            }
            for (k, &col) in idx.iter().enumerate() {
                x[col] = x[col] + alpha * (sol[k] - x[col]);
            }
            for &col in &idx {
                if x[col] <= T::epsilon() * scale {
                    x[col] = T::zero();
                    passive[col] = false;
                }
            }
        }
        if stalled {
            break;
        }
    }
    x
}

fn solve_passive<T: Scalar>(gram: ArrayView2<T>, etf: ArrayView1<T>, idx: &[usize]) -> Option<Vec<T>> {
    let k = idx.len();
    let mut sub = Array2::<T>::zeros((k, k));
    let mut rhs = Vec::with_capacity(k);
    for (a, &i) in idx.iter().enumerate() {
        rhs.push(etf[i]);
        for (b, &j) in idx.iter().enumerate() {
            sub[[a, b]] = gram[[i, j]];
        }
    }
    if let Some(x) = cholesky_solve(sub.view(), &rhs) {
        return Some(x);
    }
    let ridge = T::of(1e-12) * (0..k).map(|a| sub[[a, a]]).fold(T::zero(), T::max).max(T::tiny());
    for a in 0..k {
        sub[[a, a]] += ridge;
    }
    cholesky_solve(sub.view(), &rhs)
}

/// Projects `u` onto `{x : rows . x >= 0}`. `rows` is `q x p`, `u` has length `p`.
pub fn project<T: Scalar>(rows: ArrayView2<T>, u: ArrayView1<T>) -> Array1<T> {
    let gram = rows.dot(&rows.t());
    project_with_gram(rows, gram.view(), u)
}

/// As [`project`] with `gram = rows rows^T` supplied by the caller.
pub fn project_with_gram<T: Scalar>(rows: ArrayView2<T>, gram: ArrayView2<T>, u: ArrayView1<T>) -> Array1<T> {
    if rows.nrows() == 0 {
        return u.to_owned();
    }
    let gu = rows.dot(&u);
    if gu.iter().all(|&v| v >= T::zero()) {
        return u.to_owned();
    }
    // E = G^T, f = -u: gram = G G^T, E^T f = -G u.
    let etf = gu.mapv(|v| -v);
    let lambda = nnls_gram(gram, etf.view(), rows.nrows());
    let mut x = u.to_owned();
    x += &rows.t().dot(&lambda);
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn nnls_simple() {
        // min |x - (1, -2)| over x >= 0 -> (1, 0)
        let e = Array2::<f64>::eye(2);
        let f = array![1.0, -2.0];
        let x = nnls(e.view(), f.view());
        assert!((x[0] - 1.0).abs() < 1e-14 && x[1].abs() < 1e-14);
    }

    #[test]
    fn projection_onto_orthant_and_halfspace() {
        let rows = Array2::<f64>::eye(3);
        let p: Array1<f64> = project(rows.view(), array![1.0, -1.0, 2.0].view());
        assert_eq!(p, array![1.0, 0.0, 2.0]);

        let half: Array2<f64> = array![[1.0, 1.0]];
        let p = project(half.view(), array![-1.0, -3.0].view());
        // projection onto x + y >= 0 along (1,1)/sqrt2
        assert!((p[0] - 1.0).abs() < 1e-12 && (p[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_is_idempotent_and_feasible() {
        let rows: Array2<f64> = array![[1.0, -0.5, 0.0], [0.0, 1.0, 1.0], [1.0, 1.0, 1.0], [-0.2, 0.0, 1.0], [1.0, -0.5, 0.0]];
        let u = array![-1.0, 2.0, -3.0];
        let p = project(rows.view(), u.view());
        assert!(rows.dot(&p).iter().all(|&v| v >= -1e-12));
        let pp = project(rows.view(), p.view());
        for (a, b) in p.iter().zip(pp.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Moreau: residual is orthogonal to the projection.
        let r = &u - &p;
        assert!(r.dot(&p).abs() < 1e-12);
    }
}
