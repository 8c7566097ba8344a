//! Closed-form map from convex variables to parallel-network weights.
//!
//! Block `b = (s, l, i)` of side `z` becomes the sub-network
//!
//! ```text
//! W1 = (1/m2) [I^s_1 z_1, ..., I^s_m1 z_m1]        (d x m1)
//! W2 = rows j filled with I^s_j                     (m1 x m2)
//! w3 = +1 (all m2 entries; -1 for the z' side)
//! ```
//!
//! so that its output is `A_b z_b` and its path norm is `|z_b|_F / sqrt(m2)`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::convex_program::{ConvexProgram, ConvexVariables};
use crate::error::{Error, Result};
use crate::network::{ParallelNet, SubNet};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoverOptions {
    /// Skip sub-networks whose block is identically zero.
    pub prune_zero: bool,
    /// Largest accepted constraint violation.
    pub tol: f64,
}

impl Default for RecoverOptions {
    fn default() -> Self {
        Self {
            prune_zero: false,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub max_output_diff: f64,
    pub reg_cost_diff: f64,
    /// Sub-networks in the full construction: twice the number of blocks.
    pub k_total: usize,
    /// Sub-networks actually present in the checked network.
    pub emitted: usize,
}

/// 1-based `(s, l, i)` of sub-network `k` in `1..=2 M P1 P2`; the second
/// half (the `z'` side) repeats the first.
pub fn decode_index(k: usize, m: usize, p1: usize, p2: usize) -> Result<(usize, usize, usize)> {
    let half = m * p1 * p2;
    if k == 0 || k > 2 * half {
        return Err(Error::IndexOutOfRange { k, max: 2 * half });
    }
    let k = if k > half { k - half } else { k };
    let s = (k - 1) / (p1 * p2) + 1;
    let l = ((k - 1) % (p1 * p2)) / p1 + 1;
    let i = (k - 1) % p1 + 1;
    Ok((s, l, i))
}

/// Inverse of [`decode_index`]; `second` selects the `z'` half.
pub fn encode_index(s: usize, l: usize, i: usize, m: usize, p1: usize, p2: usize, second: bool) -> Result<usize> {
    if s == 0 || l == 0 || i == 0 || s > m || l > p2 || i > p1 {
        return Err(Error::InvalidArgument(format!("(s, l, i) = ({s}, {l}, {i}) outside the grid")));
    }
    let k = (s - 1) * p1 * p2 + (l - 1) * p1 + i;
    Ok(if second { k + m * p1 * p2 } else { k })
}

/// Builds the parallel network realizing `vars`. Sub-networks follow block
/// order, all `z` blocks first, and carry 1-based `(s, l, i)` provenance.
pub fn recover_network<T: Scalar>(
    prog: &ConvexProgram<T>,
    vars: &ConvexVariables<T>,
    opts: &RecoverOptions,
) -> Result<ParallelNet<T>> {
    let total = prog.constraint_residuals(vars)?.total.to_f64_lossy();
    if total > opts.tol {
        return Err(Error::InfeasibleVars { total, tol: opts.tol });
    }
    let (d, m1, m2) = (prog.d(), prog.m1(), prog.m2());
    let inv_m2 = T::one() / T::of(m2 as f64);
    let mut subnets = Vec::with_capacity(2 * prog.num_blocks());
    let mut provenance = Vec::with_capacity(2 * prog.num_blocks());
    for (side, blocks, out_sign) in [(0, &vars.z, T::one()), (1, &vars.zp, -T::one())] {
        let _ = side;
        for (b, u) in prog.blocks().iter().zip(blocks.iter()) {
            if opts.prune_zero && u.iter().all(|&v| v == T::zero()) {
                continue;
            }
            let signs = &prog.signs()[b.s];
            let mut w1 = Array2::<T>::zeros((d, m1));
            let mut w2 = Array2::<T>::zeros((m1, m2));
            for j in 0..m1 {
                let sj: T = signs.sign(j);
                w1.column_mut(j).assign(&(&u.column(j) * (sj * inv_m2)));
                w2.row_mut(j).fill(sj);
            }
            subnets.push(SubNet::new(vec![w1, w2], Array1::from_elem(m2, out_sign))?);
            provenance.push((b.s + 1, b.l + 1, b.i + 1));
        }
    }
    let mut net = ParallelNet::new(subnets).unwrap_or_else(|_| ParallelNet::empty(vec![d, m1, m2]));
    net.provenance = Some(provenance);
    Ok(net)
}

/// Output and regularization-cost differences between `net` and the
/// convex variables.
pub fn verify_equivalence<T: Scalar>(
    prog: &ConvexProgram<T>,
    vars: &ConvexVariables<T>,
    net: &ParallelNet<T>,
) -> Result<RecoveryReport> {
    let fit = prog.fit_value(vars)?;
    let out = if net.num_subnets() == 0 {
        Array1::zeros(prog.n())
    } else {
        net.forward(prog.x())?
    };
    let max_output_diff = out
        .iter()
        .zip(fit.iter())
        .map(|(a, b)| (*a - *b).abs().to_f64_lossy())
        .fold(0.0, f64::max);
    let (gz, gzp) = vars.group_norms();
    let scale = T::one() / T::of(prog.m2() as f64).sqrt();
    let reg_cost_diff = (net.path_regularizer() - scale * (gz + gzp)).abs().to_f64_lossy();
    Ok(RecoveryReport {
        max_output_diff,
        reg_cost_diff,
        k_total: 2 * prog.num_blocks(),
        emitted: net.num_subnets(),
    })
}
