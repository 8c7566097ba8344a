//! Rank-truncated training: SVD truncation, the approximation factor
//! `(1 + sqrt(m1 m2) R sigma_{r+1} / beta)^2`, rank selection and the
//! transfer objective of weights trained on the truncated data.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{reconstruct, svd};
use crate::loss::Loss;
use crate::network::ParallelNet;
use crate::scalar::Scalar;

/// Best rank-`r` approximation and the full singular spectrum (descending).
pub fn truncate<T: Scalar>(x: ArrayView2<T>, r: usize) -> Result<(Array2<T>, Vec<T>)> {
    let max = x.nrows().min(x.ncols());
    if r == 0 || r > max {
        return Err(Error::RankOutOfRange { r, max });
    }
    let f = svd(x);
    Ok((reconstruct(&f, r), f.sigma.to_vec()))
}

pub fn singular_values<T: Scalar>(x: ArrayView2<T>) -> Vec<T> {
    svd(x).sigma.to_vec()
}

pub fn bound_factor(beta: f64, m1: usize, m2: usize, lipschitz: f64, sigma_next: f64) -> f64 {
    let t = 1.0 + ((m1 * m2) as f64).sqrt() * lipschitz * sigma_next / beta;
    t * t
}

/// Smallest `r` whose factor is at most `1 + eps` (`sigma_{r+1} = 0` past
/// the end, so the full rank always qualifies).
pub fn choose_rank(sigma: &[f64], eps: f64, beta: f64, m1: usize, m2: usize, lipschitz: f64) -> usize {
    (1..=sigma.len())
        .find(|&r| {
            let next = sigma.get(r).copied().unwrap_or(0.0);
            bound_factor(beta, m1, m2, lipschitz, next) <= 1.0 + eps
        })
        .unwrap_or(sigma.len())
}

/// `loss(forward(net, X), y) + beta * path_regularizer(net)`.
pub fn transfer_objective<T: Scalar>(
    net: &ParallelNet<T>,
    x: ArrayView2<T>,
    y: ArrayView1<T>,
    beta: f64,
    loss: Loss,
) -> Result<T> {
    let f = if net.num_subnets() == 0 {
        Array1::zeros(x.nrows())
    } else {
        net.forward(x)?
    };
    Ok(loss.value(f.view(), y) + T::of(beta) * net.path_regularizer())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankReport {
    pub sigma: Vec<f64>,
    pub r: usize,
    pub factor: f64,
    pub p_hat: f64,
    pub p_r: f64,
    pub p_star: Option<f64>,
    pub gap_hat: Option<f64>,
    pub gap_star: Option<f64>,
    pub first_patterns_full: Option<usize>,
    pub first_patterns_truncated: usize,
}

impl LowRankReport {
    /// `p_star - tol <= p_r <= p_star * factor + tol` with `tol = 1e-5 (1 + p_star)`.
    pub fn sandwich_holds(&self) -> Option<bool> {
        self.p_star.map(|p| {
            let tol = 1e-5 * (1.0 + p);
            p - tol <= self.p_r && self.p_r <= p * self.factor + tol
        })
    }

    pub fn write_spectrum_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Csv {
            row: 0,
            col: 0,
            msg: e.to_string(),
        };
        w.write_record(["index", "sigma"]).map_err(err)?;
        for (i, s) in self.sigma.iter().enumerate() {
            w.write_record(&[(i + 1).to_string(), s.to_string()]).map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }
}
