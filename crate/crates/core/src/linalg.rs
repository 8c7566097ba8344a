//! Dense kernels used across the crate: one-sided Jacobi SVD, symmetric
//! eigenvalues, Cholesky solves.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::scalar::Scalar;

/// Thin singular value decomposition `A = U diag(sigma) V^T` with `sigma`
/// sorted nonincreasing.
#[derive(Clone, Debug)]
pub struct Svd<T> {
    pub u: Array2<T>,
    pub sigma: Array1<T>,
    pub vt: Array2<T>,
}

/// One-sided Jacobi (Hestenes) SVD. Deterministic sweep order; converges to
/// working precision for the desk-scale matrices this crate handles.
pub fn svd<T: Scalar>(a: ArrayView2<T>) -> Svd<T> {
    let (n, d) = a.dim();
    if n < d {
        let t = svd(a.t());
        return Svd {
            u: t.vt.t().to_owned(),
            sigma: t.sigma,
            vt: t.u.t().to_owned(),
        };
    }
    // n >= d: orthogonalize the columns of W = A V.
    let mut w = a.to_owned();
    let mut v = Array2::<T>::eye(d);
    let eps = T::epsilon();
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..d {
            for q in (p + 1)..d {
                let (mut alpha, mut beta, mut gamma) = (T::zero(), T::zero(), T::zero());
                for r in 0..n {
                    let wp = w[[r, p]];
                    let wq = w[[r, q]];
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::of(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let sn = c * t;
                for r in 0..n {
                    let wp = w[[r, p]];
                    let wq = w[[r, q]];
                    w[[r, p]] = c * wp - sn * wq;
                    w[[r, q]] = sn * wp + c * wq;
                }
                for r in 0..d {
                    let vp = v[[r, p]];
                    let vq = v[[r, q]];
                    v[[r, p]] = c * vp - sn * vq;
                    v[[r, q]] = sn * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<T> = (0..d)
        .map(|j| w.column(j).iter().map(|&x| x * x).sum::<T>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut u = Array2::<T>::zeros((n, d));
    let mut sigma = Array1::<T>::zeros(d);
    let mut vt = Array2::<T>::zeros((d, d));
    for (k, &j) in order.iter().enumerate() {
        sigma[k] = norms[j];
        if norms[j] > T::zero() {
            let col = w.column(j).mapv(|x| x / norms[j]);
            u.column_mut(k).assign(&col);
        }
        vt.row_mut(k).assign(&v.column(j));
    }
    complete_basis(&mut u, &sigma);
    Svd { u, sigma, vt }
}

/// Fills columns of `u` that belong to zero singular values with an
/// orthonormal completion so `u` always has orthonormal columns.
fn complete_basis<T: Scalar>(u: &mut Array2<T>, sigma: &Array1<T>) {
    let (n, k) = u.dim();
    let scale = sigma.iter().cloned().fold(T::zero(), T::max);
    let cutoff = scale * T::epsilon() * T::of(n.max(k) as f64);
    for j in 0..k {
        if sigma[j] > cutoff && sigma[j] > T::zero() {
            continue;
        }
        // Gram-Schmidt a unit vector against the accepted columns.
        'cand: for e in 0..n {
            let mut cand = Array1::<T>::zeros(n);
            cand[e] = T::one();
            for _ in 0..2 {
                for c in 0..k {
                    if c == j || (c > j && !(sigma[c] > cutoff)) {
                        continue;
                    }
                    let col = u.column(c);
                    let proj = col.dot(&cand);
                    cand.scaled_add(-proj, &col);
                }
            }
            let norm = cand.dot(&cand).sqrt();
            if norm > T::of(1e-3) {
                u.column_mut(j).assign(&cand.mapv(|x| x / norm));
                break 'cand;
            }
        }
    }
}

/// Numerical rank: singular values above `rtol * sigma_max`.
pub fn numeric_rank<T: Scalar>(a: ArrayView2<T>, rtol: f64) -> usize {
    let s = svd(a).sigma;
    let top = s.iter().cloned().fold(T::zero(), T::max);
    if top <= T::zero() {
        return 0;
    }
    let cut = top * T::of(rtol);
    s.iter().filter(|&&x| x > cut).count()
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix.
pub fn sym_max_eigenvalue<T: Scalar>(m: ArrayView2<T>) -> T {
    let s = svd(m).sigma;
    s.iter().cloned().fold(T::zero(), T::max)
}

/// Solves `M x = b` for symmetric positive definite `M`; `None` when the
/// factorization breaks down.
pub fn cholesky_solve<T: Scalar>(m: ArrayView2<T>, b: &[T]) -> Option<Vec<T>> {
    let n = m.nrows();
    let mut l = Array2::<T>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if !(sum > T::zero()) {
                    return None;
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        let mut sum = y[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l[[k, i]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    Some(y)
}

/// Spectral norm of a matrix.
pub fn spectral_norm<T: Scalar>(a: ArrayView2<T>) -> T {
    svd(a).sigma.iter().cloned().fold(T::zero(), T::max)
}

/// Rank-`r` reconstruction from an SVD.
pub fn reconstruct<T: Scalar>(svd: &Svd<T>, r: usize) -> Array2<T> {
    let r = r.min(svd.sigma.len());
    let u = svd.u.slice(s![.., ..r]);
    let vt = svd.vt.slice(s![..r, ..]);
    let scaled = &u * &svd.sigma.slice(s![..r]).insert_axis(Axis(0));
    scaled.dot(&vt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn svd_reconstructs_tall_and_wide() {
        let a: Array2<f64> = array![[1.0, 2.0, 0.5], [-1.0, 0.3, 2.0], [0.0, 1.0, 1.0], [4.0, -2.0, 0.1]];
        for m in [a.clone(), a.t().to_owned()] {
            let f = svd(m.view());
            let back = reconstruct(&f, f.sigma.len());
            for (x, y) in back.iter().zip(m.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
            for w in f.sigma.windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn rank_of_outer_product() {
        let a = array![[1.0, 2.0], [2.0, 4.0], [-1.0, -2.0]];
        assert_eq!(numeric_rank(a.view(), 1e-10), 1);
        let z = Array2::<f64>::zeros((3, 2));
        assert_eq!(numeric_rank(z.view(), 1e-10), 0);
    }

    #[test]
    fn cholesky_matches_direct() {
        let m: Array2<f64> = array![[4.0, 1.0], [1.0, 3.0]];
        let x = cholesky_solve(m.view(), &[1.0, 2.0]).unwrap();
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-14);
        assert!((x[0] + 3.0 * x[1] - 2.0).abs() < 1e-14);
        let bad = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky_solve(bad.view(), &[1.0, 1.0]).is_none());
    }
}
