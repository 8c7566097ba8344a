//! The finite convex program equivalent to training a three-layer parallel
//! ReLU network with path regularization.
//!
//! Variables come in blocks `u_b` of shape `d x m1`, one per key
//! `b = (s, l, i)` and per side (`z` and `z'`). With first-layer patterns
//! `D_1j` taken from tuple `i`, second-layer pattern `D_2l` and signs `I^s`,
//!
//! ```text
//! A_b u       = D_2l sum_j D_1j X u_j
//! fit         = sum_b A_b (z_b - z'_b)
//! objective   = loss(fit, y) + beta / sqrt(m2) * (sum_b |z_b|_F + sum_b |z'_b|_F)
//! cone C_b    : (2 D_1j - I) X (I^s_j u_j) >= 0  for every j
//!               (2 D_2l - I) sum_j D_1j X u_j >= 0
//! ```
//!
//! The product matrix is never formed; [`ConvexProgram::densify`] exists for
//! debugging and tests.

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arrangements::{ArrangementSet, FirstLayerGrid, SignPattern};
use crate::error::{Error, Result};
use crate::loss::Loss;
use crate::lp;
use crate::scalar::{relu, Scalar};

/// Block key; all indices are 0-based positions in the program's sign list,
/// second-layer set and first-layer grid. Keys order as `(s, l, i)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockKey {
    pub s: usize,
    pub l: usize,
    pub i: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramSpec {
    pub m2: usize,
    pub beta: f64,
    #[serde(default)]
    pub loss: Loss,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProgramOptions {
    /// Keep one block per class of `(tuple, signs)` pairs that differ only by
    /// a permutation of first-layer neurons.
    pub reduce_symmetry: bool,
    /// Drop blocks whose output is identically zero on their cone.
    pub prune_empty: bool,
    /// Cap on the number of scalar variables (both sides).
    pub max_scalars: usize,
}

impl Default for ProgramOptions {
    fn default() -> Self {
        Self {
            reduce_symmetry: false,
            prune_empty: false,
            max_scalars: 2_000_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvexProgram<T> {
    x: Array2<T>,
    y: Array1<T>,
    grid: FirstLayerGrid,
    second: ArrangementSet,
    signs: Vec<SignPattern>,
    spec: ProgramSpec,
    blocks: Vec<BlockKey>,
    d1: Vec<Array1<T>>,
    d2: Vec<Array1<T>>,
    /// Per first-layer pattern, the rows of `(2D - I) X` that define its cone.
    facets: Vec<Array2<T>>,
}

/// Paired block variables, aligned with [`ConvexProgram::blocks`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvexVariables<T> {
    pub keys: Vec<BlockKey>,
    pub z: Vec<Array2<T>>,
    pub zp: Vec<Array2<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Residuals<T> {
    pub total: T,
    /// Violation per block, `z` and `z'` combined.
    pub per_block: Vec<(BlockKey, T)>,
}

/// Sum of Frobenius norms of the blocks of one side.
pub fn group_norm<T: Scalar>(side: &[Array2<T>]) -> T {
    side.iter().map(frob).sum()
}

pub(crate) fn frob<T: Scalar>(a: &Array2<T>) -> T {
    a.iter().map(|&v| v * v).sum::<T>().sqrt()
}

impl<T: Scalar> ConvexVariables<T> {
    pub fn zeros(keys: Vec<BlockKey>, d: usize, m1: usize) -> Self {
        let z = vec![Array2::zeros((d, m1)); keys.len()];
        Self {
            zp: z.clone(),
            z,
            keys,
        }
    }

    /// Flat array: all `z` blocks then all `z'` blocks, each block in key
    /// order and within a block neuron-major (`j1`, then the `d` entries).
    pub fn to_flat(&self) -> Vec<f64> {
        self.z
            .iter()
            .chain(&self.zp)
            .flat_map(|b| b.t().iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>())
            .collect()
    }

    pub fn from_flat(keys: Vec<BlockKey>, d: usize, m1: usize, flat: &[f64]) -> Result<Self> {
        let per = d * m1;
        if flat.len() != 2 * per * keys.len() {
            return Err(Error::KeyMismatch(format!(
                "flat array has {} entries, expected {}",
                flat.len(),
                2 * per * keys.len()
            )));
        }
        let block = |c: &[f64]| {
            Array2::from_shape_vec((m1, d), c.iter().map(|&v| T::of(v)).collect())
                .expect("chunk size")
                .reversed_axes()
                .as_standard_layout()
                .to_owned()
        };
        let mut chunks = flat.chunks(per).map(block);
        let z = chunks.by_ref().take(keys.len()).collect();
        let zp = chunks.collect();
        Ok(Self { keys, z, zp })
    }

    pub fn group_norms(&self) -> (T, T) {
        (group_norm(&self.z), group_norm(&self.zp))
    }

    /// Number of blocks (either side) with a nonzero entry.
    pub fn support(&self) -> usize {
        self.z
            .iter()
            .chain(&self.zp)
            .filter(|b| b.iter().any(|&v| v != T::zero()))
            .count()
    }
}

impl<T: Scalar> ConvexProgram<T> {
    pub fn build(
        x: Array2<T>,
        y: Array1<T>,
        grid: FirstLayerGrid,
        second: ArrangementSet,
        signs: Vec<SignPattern>,
        spec: ProgramSpec,
        opts: ProgramOptions,
    ) -> Result<Self> {
        let (n, d) = x.dim();
        if y.len() != n {
            return Err(Error::DimensionMismatch(format!("y has {} entries, X has {n} rows", y.len())));
        }
        if grid.is_empty() {
            return Err(Error::EmptyFirstSet);
        }
        if second.is_empty() {
            return Err(Error::InvalidArgument("second-layer arrangement set is empty".into()));
        }
        if grid.patterns.n != n || second.n != n {
            return Err(Error::DimensionMismatch("arrangement sets built for a different n".into()));
        }
        let m1 = grid.m1();
        if m1 == 0 || spec.m2 == 0 {
            return Err(Error::InvalidArgument("m1 and m2 must be >= 1".into()));
        }
        if !(spec.beta > 0.0) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {}", spec.beta)));
        }
        if signs.is_empty() || signs.iter().any(|s| s.len() != m1) {
            return Err(Error::InvalidArgument(format!("sign patterns must be nonempty with length m1 = {m1}")));
        }
        let mut sorted = signs.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != signs.len() {
            return Err(Error::InvalidArgument("sign patterns must be distinct".into()));
        }

        let d1: Vec<Array1<T>> = grid.patterns.patterns.iter().map(|p| p.diag()).collect();
        let facets = d1
            .par_iter()
            .map(|dg| pattern_facets(x.view(), dg))
            .collect::<Result<Vec<_>>>()?;
        let d2 = second.patterns.iter().map(|p| p.diag()).collect();
        let mut prog = Self {
            x,
            y,
            grid,
            second,
            signs,
            spec,
            blocks: Vec::new(),
            d1,
            d2,
            facets,
        };

        let pairs = prog.kept_pairs(opts.reduce_symmetry);
        let mut blocks: Vec<BlockKey> = Vec::with_capacity(pairs.len() * prog.second.len());
        for &(i, s) in &pairs {
            for l in 0..prog.second.len() {
                blocks.push(BlockKey { s, l, i });
            }
        }
        blocks.sort();
        let scalars = 2 * d * m1 * blocks.len();
        if !opts.prune_empty && scalars > opts.max_scalars {
            return Err(Error::BudgetExceeded {
                needed: scalars.to_string(),
                budget: opts.max_scalars,
            });
        }
        if opts.prune_empty {
            let keep: Vec<bool> = blocks
                .par_iter()
                .map(|&b| prog.block_is_live(b))
                .collect::<Result<_>>()?;
            blocks = blocks.into_iter().zip(keep).filter(|(_, k)| *k).map(|(b, _)| b).collect();
            let scalars = 2 * d * m1 * blocks.len();
            if scalars > opts.max_scalars {
                return Err(Error::BudgetExceeded {
                    needed: scalars.to_string(),
                    budget: opts.max_scalars,
                });
            }
        }
        prog.blocks = blocks;
        Ok(prog)
    }

    /// `(tuple, sign)` pairs that get blocks.
    fn kept_pairs(&self, reduce: bool) -> Vec<(usize, usize)> {
        let all = (0..self.grid.len()).flat_map(|i| (0..self.signs.len()).map(move |s| (i, s)));
        if !reduce || !self.grid.symmetric {
            return all.collect();
        }
        let tuple_pos: HashMap<&[usize], usize> =
            self.grid.tuples.iter().enumerate().map(|(i, t)| (t.as_slice(), i)).collect();
        let sign_pos: HashMap<&[i8], usize> =
            self.signs.iter().enumerate().map(|(s, p)| (p.signs(), s)).collect();
        all.filter(|&(i, s)| {
            let mut pairs: Vec<(usize, i8)> = self.grid.tuples[i]
                .iter()
                .copied()
                .zip(self.signs[s].signs().iter().copied())
                .collect();
            let original = pairs.clone();
            pairs.sort();
            if pairs == original {
                return true;
            }
            let t: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let g: Vec<i8> = pairs.iter().map(|p| p.1).collect();
            // Keep unless the canonical representative is itself present.
            !(tuple_pos.contains_key(t.as_slice()) && sign_pos.contains_key(g.as_slice()))
        })
        .collect()
    }

    fn block_is_live(&self, b: BlockKey) -> Result<bool> {
        let (n, d) = self.x.dim();
        let m1 = self.m1();
        // objective: sum of the block output
        let mut obj = vec![0.0; d * m1];
        let d2 = &self.d2[b.l];
        for j in 0..m1 {
            let d1 = &self.d1[self.grid.tuples[b.i][j]];
            for r in 0..n {
                let w = (d2[r] * d1[r]).to_f64_lossy();
                if w != 0.0 {
                    for c in 0..d {
                        obj[j * d + c] += w * self.x[[r, c]].to_f64_lossy();
                    }
                }
            }
        }
        let scale = obj.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if scale == 0.0 {
            return Ok(false);
        }
        let rows = self.cone_rows(b);
        let cons: Vec<_> = rows
            .rows()
            .into_iter()
            .map(|r| (r.iter().map(|v| v.to_f64_lossy()).collect(), lp::Cmp::Ge, 0.0))
            .collect();
        let best = lp::maximize(&obj, &cons, (-1.0, 1.0))?;
        Ok(best.is_some_and(|(_, v)| v > 1e-9 * scale.max(1.0)))
    }

    pub fn x(&self) -> ArrayView2<'_, T> {
        self.x.view()
    }

    pub fn y(&self) -> ArrayView1<'_, T> {
        self.y.view()
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn m1(&self) -> usize {
        self.grid.m1()
    }

    pub fn m2(&self) -> usize {
        self.spec.m2
    }

    pub fn beta(&self) -> T {
        T::of(self.spec.beta)
    }

    /// Group-norm weight `beta / sqrt(m2)`.
    pub fn mu(&self) -> T {
        T::of(self.spec.beta / (self.spec.m2 as f64).sqrt())
    }

    pub fn loss(&self) -> Loss {
        self.spec.loss
    }

    pub fn spec(&self) -> ProgramSpec {
        self.spec
    }

    pub fn grid(&self) -> &FirstLayerGrid {
        &self.grid
    }

    pub fn second(&self) -> &ArrangementSet {
        &self.second
    }

    pub fn signs(&self) -> &[SignPattern] {
        &self.signs
    }

    /// Grid sizes `(M, P1, P2)`.
    pub fn grid_dims(&self) -> (usize, usize, usize) {
        (self.signs.len(), self.grid.len(), self.second.len())
    }

    pub fn blocks(&self) -> &[BlockKey] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Scalars per block (`d m1`).
    pub fn block_dim(&self) -> usize {
        self.d() * self.m1()
    }

    pub fn num_variables(&self) -> usize {
        2 * self.block_dim() * self.blocks.len()
    }

    pub fn zeros(&self) -> ConvexVariables<T> {
        ConvexVariables::zeros(self.blocks.clone(), self.d(), self.m1())
    }

    /// Replaces the labels, keeping all arrangement data.
    pub fn with_targets(&self, y: Array1<T>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(Error::DimensionMismatch("label length differs from n".into()));
        }
        Ok(Self { y, ..self.clone() })
    }

    /// Replaces the loss, keeping all arrangement data.
    pub fn with_loss(&self, loss: Loss) -> Self {
        let mut p = self.clone();
        p.spec.loss = loss;
        p
    }

    /// `0/1` mask `D_2l D_1j` of neuron `j` in block `b`.
    pub fn mask(&self, b: BlockKey, j: usize) -> Array1<T> {
        &self.d1[self.grid.tuples[b.i][j]] * &self.d2[b.l]
    }

    /// `A_b u` for a `d x m1` block `u`.
    pub fn apply_block(&self, b: BlockKey, u: ArrayView2<T>) -> Array1<T> {
        let xu = self.x.dot(&u);
        let mut out = Array1::zeros(self.n());
        for j in 0..self.m1() {
            out += &(&xu.column(j) * &self.d1[self.grid.tuples[b.i][j]]);
        }
        out * &self.d2[b.l]
    }

    /// `A_b^T v` as a `d x m1` block.
    pub fn apply_block_t(&self, b: BlockKey, v: ArrayView1<T>) -> Array2<T> {
        let w = &v * &self.d2[b.l];
        let mut out = Array2::zeros((self.d(), self.m1()));
        for j in 0..self.m1() {
            let wj = &w * &self.d1[self.grid.tuples[b.i][j]];
            out.column_mut(j).assign(&self.x.t().dot(&wj));
        }
        out
    }

    /// Rows `G` of the cone `{u : G vec(u) >= 0}` of block `b`, acting on the
    /// neuron-major flattening of `u`. All-zero rows are dropped.
    pub fn cone_rows(&self, b: BlockKey) -> Array2<T> {
        let (n, d) = self.x.dim();
        let m1 = self.m1();
        let sign = &self.signs[b.s];
        let mut rows: Vec<Vec<T>> = Vec::with_capacity((m1 + 1) * n);
        for j in 0..m1 {
            let sj: T = sign.sign(j);
            for f in self.facets[self.grid.tuples[b.i][j]].outer_iter() {
                let mut row = vec![T::zero(); d * m1];
                for c in 0..d {
                    row[j * d + c] = sj * f[c];
                }
                rows.push(row);
            }
        }
        let d2 = &self.d2[b.l];
        for r in 0..n {
            let f = if d2[r] > T::zero() { T::one() } else { -T::one() };
            let mut row = vec![T::zero(); d * m1];
            for j in 0..m1 {
                if self.d1[self.grid.tuples[b.i][j]][r] > T::zero() {
                    for c in 0..d {
                        row[j * d + c] = f * self.x[[r, c]];
                    }
                }
            }
            rows.push(row);
        }
        rows.retain(|r| r.iter().any(|&v| v != T::zero()));
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        rows.dedup();
        let mut g = Array2::zeros((rows.len(), d * m1));
        for (k, r) in rows.iter().enumerate() {
            g.row_mut(k).assign(&ArrayView1::from(r.as_slice()));
        }
        g
    }

    fn check_keys(&self, vars: &ConvexVariables<T>) -> Result<()> {
        let shape = (self.d(), self.m1());
        if vars.keys != self.blocks
            || vars.z.len() != self.blocks.len()
            || vars.zp.len() != self.blocks.len()
            || vars.z.iter().chain(&vars.zp).any(|b| b.dim() != shape)
        {
            return Err(Error::KeyMismatch(format!(
                "expected {} blocks of shape {shape:?}",
                self.blocks.len()
            )));
        }
        Ok(())
    }

    /// `sum_b A_b (z_b - z'_b)`, reduced in a fixed order.
    pub fn fit_value(&self, vars: &ConvexVariables<T>) -> Result<Array1<T>> {
        self.check_keys(vars)?;
        let parts: Vec<Array1<T>> = self
            .blocks
            .par_iter()
            .enumerate()
            .with_min_len(64)
            .fold_chunks(64, || Array1::zeros(self.n()), |mut acc, (k, &b)| {
                let diff = &vars.z[k] - &vars.zp[k];
                if diff.iter().any(|&v| v != T::zero()) {
                    acc += &self.apply_block(b, diff.view());
                }
                acc
            })
            .collect();
        Ok(parts.into_iter().fold(Array1::zeros(self.n()), |a, p| a + p))
    }

    /// Sum of the relu of every violated cone inequality, over both sides.
    pub fn constraint_residuals(&self, vars: &ConvexVariables<T>) -> Result<Residuals<T>> {
        self.check_keys(vars)?;
        let per_block: Vec<(BlockKey, T)> = self
            .blocks
            .par_iter()
            .enumerate()
            .map(|(k, &b)| (b, self.block_violation(b, &vars.z[k]) + self.block_violation(b, &vars.zp[k])))
            .collect();
        let total = per_block.iter().map(|p| p.1).sum();
        Ok(Residuals { total, per_block })
    }

    /// Violation of one block, with every inequality counted once per
    /// `(neuron, sample)` and once per sample for the second layer.
    pub fn block_violation(&self, b: BlockKey, u: &Array2<T>) -> T {
        if u.iter().all(|&v| v == T::zero()) {
            return T::zero();
        }
        let xu = self.x.dot(u);
        let sign = &self.signs[b.s];
        let mut total = T::zero();
        let mut inner = Array1::<T>::zeros(self.n());
        for j in 0..self.m1() {
            let d1 = &self.d1[self.grid.tuples[b.i][j]];
            let sj: T = sign.sign(j);
            for r in 0..self.n() {
                let v = sj * xu[[r, j]];
                let signed = if d1[r] > T::zero() { v } else { -v };
                total += relu(-signed);
                inner[r] += d1[r] * xu[[r, j]];
            }
        }
        let d2 = &self.d2[b.l];
        for r in 0..self.n() {
            let signed = if d2[r] > T::zero() { inner[r] } else { -inner[r] };
            total += relu(-signed);
        }
        total
    }

    /// `loss(fit, y) + mu (|z|_F1 + |z'|_F1) + lambda * violation`.
    pub fn objective(&self, vars: &ConvexVariables<T>, lambda: T) -> Result<T> {
        let fit = self.fit_value(vars)?;
        let (gz, gzp) = vars.group_norms();
        let mut obj = self.loss().value(fit.view(), self.y.view()) + self.mu() * (gz + gzp);
        if lambda > T::zero() {
            obj += lambda * self.constraint_residuals(vars)?.total;
        }
        Ok(obj)
    }

    /// Regularization part only: `mu (|z|_F1 + |z'|_F1)`.
    pub fn regularizer(&self, vars: &ConvexVariables<T>) -> T {
        let (gz, gzp) = vars.group_norms();
        self.mu() * (gz + gzp)
    }

    /// The `n x (d m1 #blocks)` matrix with `fit = Xt (z - z')` for the
    /// flattening of [`ConvexVariables::to_flat`] (one side).
    pub fn densify(&self) -> Array2<T> {
        let (n, d) = self.x.dim();
        let m1 = self.m1();
        let mut out = Array2::zeros((n, d * m1 * self.blocks.len()));
        for (k, &b) in self.blocks.iter().enumerate() {
            for j in 0..m1 {
                let mask = self.mask(b, j);
                let col0 = (k * m1 + j) * d;
                let mut dst = out.slice_mut(s![.., col0..col0 + d]);
                for r in 0..n {
                    if mask[r] > T::zero() {
                        dst.row_mut(r).assign(&self.x.row(r));
                    }
                }
            }
        }
        out
    }

    /// `sum_b A_b A_b^T` over the given blocks (one side).
    pub fn gram_sum(&self, blocks: &[usize]) -> Array2<T> {
        let xxt = self.x.dot(&self.x.t());
        let n = self.n();
        let mut out = Array2::zeros((n, n));
        for &k in blocks {
            let b = self.blocks[k];
            for j in 0..self.m1() {
                let m = self.mask(b, j);
                for r in 0..n {
                    if m[r] == T::zero() {
                        continue;
                    }
                    for c in 0..n {
                        out[[r, c]] += m[c] * xxt[[r, c]];
                    }
                }
            }
        }
        out
    }

    pub fn metadata(&self) -> ProgramMeta {
        let (m, p1, p2) = self.grid_dims();
        ProgramMeta {
            n: self.n(),
            d: self.d(),
            m1: self.m1(),
            m2: self.m2(),
            beta: self.spec.beta,
            loss: self.loss(),
            signs: m,
            p1,
            p2,
            first_patterns: self.grid.patterns.len(),
            first_source: self.grid.patterns.source,
            second_source: self.second.source,
            blocks: self.blocks.len(),
            variables: self.num_variables(),
        }
    }
}

/// Program summary for results files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramMeta {
    pub n: usize,
    pub d: usize,
    pub m1: usize,
    pub m2: usize,
    pub beta: f64,
    pub loss: Loss,
    pub signs: usize,
    pub p1: usize,
    pub p2: usize,
    pub first_patterns: usize,
    pub first_source: crate::arrangements::Source,
    pub second_source: crate::arrangements::Source,
    pub blocks: usize,
    pub variables: usize,
}


/// Rows of `(2D - I) X` defining the cone of pattern `D`. When there are many
/// more rows than columns most are implied by the others; those are removed.
fn pattern_facets<T: Scalar>(x: ArrayView2<T>, dg: &Array1<T>) -> Result<Array2<T>> {
    let (n, d) = x.dim();
    let mut rows: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let f = if dg[r] > T::zero() { 1.0 } else { -1.0 };
            x.row(r).iter().map(|v| f * v.to_f64_lossy()).collect::<Vec<f64>>()
        })
        .filter(|r| r.iter().any(|&v| v != 0.0))
        .collect();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    rows.dedup();
    if rows.len() > 2 * d {
        let keep = lp::irredundant_rows(&rows)?;
        rows = keep.into_iter().map(|i| rows[i].clone()).collect();
    }
    let mut g = Array2::zeros((rows.len(), d));
    for (k, r) in rows.iter().enumerate() {
        for c in 0..d {
            g[[k, c]] = T::of(r[c]);
        }
    }
    Ok(g)
}
