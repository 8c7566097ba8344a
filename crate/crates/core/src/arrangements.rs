//! Hyperplane arrangements of the data matrix: the 0/1 diagonal matrices
//! `D` with `relu(X w) = D X w`, for the first and second ReLU layers.
//!
//! A pattern `D` is realizable when the cone `{w : (2D - I) X w >= 0}` has
//! nonempty interior. Exact enumeration walks the samples one at a time and
//! keeps only sign prefixes that an LP certifies with a strict margin;
//! sampled enumeration records the patterns hit by random Gaussian
//! directions.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::numeric_rank;
use crate::lp;
use crate::scalar::Scalar;

/// Strict margin a witness must clear after normalization to `|w| = 1`.
pub const STRICT_MARGIN: f64 = 1e-9;
/// Default cap on the number of candidate patterns per layer.
pub const DEFAULT_BUDGET: usize = 20_000;

const RANK_RTOL: f64 = 1e-10;

/// Bitmask over the `n` samples; bit `i` is the diagonal entry `D_ii`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ActivationPattern {
    n: usize,
    words: Vec<u64>,
}

impl ActivationPattern {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            words: vec![0; n.div_ceil(64)],
        }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut p = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            p.set(i, b);
        }
        p
    }

    /// Pattern of `X w` with the convention `D_ii = 1[x_i . w >= 0]`.
    pub fn of_product<T: Scalar>(x: ArrayView2<T>, w: ArrayView1<T>) -> Self {
        let xw = x.dot(&w);
        Self::from_bits(&xw.iter().map(|&v| v >= T::zero()).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, on: bool) {
        let bit = 1u64 << (i % 64);
        if on {
            self.words[i / 64] |= bit;
        } else {
            self.words[i / 64] &= !bit;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn complement(&self) -> Self {
        let mut c = self.clone();
        for i in 0..self.n {
            c.set(i, !self.get(i));
        }
        c
    }

    pub fn bits(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.n).map(|i| self.get(i))
    }

    /// Diagonal as a 0/1 vector.
    pub fn diag<T: Scalar>(&self) -> Array1<T> {
        Array1::from_iter(self.bits().map(|b| if b { T::one() } else { T::zero() }))
    }

    /// Hex encoding of the sample-order bit string, zero padded to whole
    /// nibbles (`"10"` encodes as `"8"`), so hex order equals mask order.
    pub fn to_hex(&self) -> String {
        let mut out = String::with_capacity(self.n.div_ceil(4));
        for chunk in 0..self.n.div_ceil(4) {
            let mut nib = 0u8;
            for k in 0..4 {
                let i = chunk * 4 + k;
                if i < self.n && self.get(i) {
                    nib |= 8 >> k;
                }
            }
            out.push(char::from_digit(nib as u32, 16).unwrap());
        }
        out
    }

    pub fn from_hex(n: usize, hex: &str) -> Result<Self> {
        if hex.len() != n.div_ceil(4) {
            return Err(Error::InvalidArgument(format!(
                "hex mask {hex:?} has wrong length for n = {n}"
            )));
        }
        let mut p = Self::zeros(n);
        for (chunk, c) in hex.chars().enumerate() {
            let nib = c
                .to_digit(16)
                .ok_or_else(|| Error::InvalidArgument(format!("bad hex digit {c:?}")))?;
            for k in 0..4 {
                let i = chunk * 4 + k;
                if nib & (8 >> k) != 0 {
                    if i >= n {
                        return Err(Error::InvalidArgument(format!("hex mask {hex:?} sets bit past n")));
                    }
                    p.set(i, true);
                }
            }
        }
        Ok(p)
    }
}

impl Ord for ActivationPattern {
    fn cmp(&self, other: &Self) -> Ordering {
        self.n.cmp(&other.n).then_with(|| {
            for i in 0..self.n {
                match (self.get(i), other.get(i)) {
                    (false, true) => return Ordering::Less,
                    (true, false) => return Ordering::Greater,
                    _ => {}
                }
            }
            Ordering::Equal
        })
    }
}

impl PartialOrd for ActivationPattern {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ActivationPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.bits() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for ActivationPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ActivationPattern({self})")
    }
}

/// Signs `sign(w_2j)` of the first-hidden-layer neurons feeding one
/// second-layer unit.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SignPattern {
    signs: Vec<i8>,
}

impl SignPattern {
    pub fn new(signs: Vec<i8>) -> Result<Self> {
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::InvalidArgument("sign entries must be +1 or -1".into()));
        }
        Ok(Self { signs })
    }

    /// Pattern number `index` of `2^m1`: bit `j` set means neuron `j` is negative.
    pub fn from_index(index: usize, m1: usize) -> Self {
        Self {
            signs: (0..m1).map(|j| if index >> j & 1 == 1 { -1 } else { 1 }).collect(),
        }
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    #[inline]
    pub fn sign<T: Scalar>(&self, j: usize) -> T {
        if self.signs[j] > 0 {
            T::one()
        } else {
            -T::one()
        }
    }
}

/// All `M = 2^m1` sign patterns, index order (all `+1` first, all `-1` last).
pub fn all_sign_patterns(m1: usize) -> Vec<SignPattern> {
    assert!(m1 < usize::BITS as usize, "m1 too large to enumerate signs");
    (0..1usize << m1).map(|s| SignPattern::from_index(s, m1)).collect()
}

/// A random subset of `count` sign patterns that always contains the
/// all-`+1` and all-`-1` patterns. Returned in index order.
pub fn sample_sign_patterns(m1: usize, count: usize, seed: u64) -> Vec<SignPattern> {
    let total: u128 = 1u128 << m1.min(127);
    if (count as u128) >= total {
        return all_sign_patterns(m1);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: BTreeSet<Vec<i8>> = BTreeSet::new();
    chosen.insert(vec![1; m1]);
    chosen.insert(vec![-1; m1]);
    while chosen.len() < count.max(2) {
        let signs = (0..m1)
            .map(|_| if rand::Rng::gen_bool(&mut rng, 0.5) { 1 } else { -1 })
            .collect();
        chosen.insert(signs);
    }
    let mut out: Vec<SignPattern> = chosen.into_iter().map(|signs| SignPattern { signs }).collect();
    out.sort_by_key(sign_index);
    out
}

fn sign_index(p: &SignPattern) -> u128 {
    p.signs
        .iter()
        .enumerate()
        .map(|(j, &s)| if s < 0 { 1u128 << j } else { 0 })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Exact,
    Sampled { seed: u64, count: usize },
}

/// How to build an arrangement set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mode {
    Exact {
        #[serde(default = "default_budget")]
        budget: usize,
    },
    Sampled { count: usize, seed: u64 },
}

fn default_budget() -> usize {
    DEFAULT_BUDGET
}

impl Mode {
    pub fn exact() -> Self {
        Mode::Exact {
            budget: DEFAULT_BUDGET,
        }
    }
}

/// Distinct patterns in lexicographic mask order with one witness each.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrangementSet {
    pub n: usize,
    pub patterns: Vec<ActivationPattern>,
    /// Unit-norm direction realizing each pattern (zero for the all-zeros
    /// pattern when no direction realizes it).
    pub witnesses: Vec<Vec<f64>>,
    pub source: Source,
    /// Set when the data matrix is identically zero.
    pub degenerate: bool,
}

impl ArrangementSet {
    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn position(&self, p: &ActivationPattern) -> Option<usize> {
        self.patterns.binary_search(p).ok()
    }

    fn from_unsorted(n: usize, mut items: Vec<(ActivationPattern, Vec<f64>)>, source: Source, degenerate: bool) -> Self {
        items.sort_by(|a, b| a.0.cmp(&b.0));
        items.dedup_by(|a, b| a.0 == b.0);
        let (patterns, witnesses) = items.into_iter().unzip();
        Self {
            n,
            patterns,
            witnesses,
            source,
            degenerate,
        }
    }

    /// Builds a set from explicit patterns (witnesses left empty).
    pub fn from_patterns(n: usize, patterns: Vec<ActivationPattern>, source: Source) -> Result<Self> {
        if patterns.iter().any(|p| p.len() != n) {
            return Err(Error::DimensionMismatch("pattern length differs from n".into()));
        }
        let items = patterns.into_iter().map(|p| (p, Vec::new())).collect();
        Ok(Self::from_unsorted(n, items, source, false))
    }

    pub fn to_json(&self) -> Result<String> {
        let (source, seed) = match self.source {
            Source::Exact => ("exact".to_string(), None),
            Source::Sampled { seed, count } => (format!("sampled:{count}"), Some(seed)),
        };
        let doc = ArrangementDoc {
            n: self.n,
            source,
            seed,
            degenerate: self.degenerate,
            patterns: self.patterns.iter().map(|p| p.to_hex()).collect(),
            witnesses: self.witnesses.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ArrangementDoc = serde_json::from_str(text)?;
        let source = if doc.source == "exact" {
            Source::Exact
        } else if let Some(count) = doc.source.strip_prefix("sampled:") {
            Source::Sampled {
                seed: doc.seed.unwrap_or(0),
                count: count
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad source {:?}", doc.source)))?,
            }
        } else {
            return Err(Error::InvalidArgument(format!("bad source {:?}", doc.source)));
        };
        let patterns = doc
            .patterns
            .iter()
            .map(|h| ActivationPattern::from_hex(doc.n, h))
            .collect::<Result<Vec<_>>>()?;
        let mut witnesses = doc.witnesses;
        witnesses.resize(patterns.len(), Vec::new());
        Ok(Self {
            n: doc.n,
            patterns,
            witnesses,
            source,
            degenerate: doc.degenerate,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ArrangementDoc {
    n: usize,
    source: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    seed: Option<u64>,
    #[serde(default)]
    degenerate: bool,
    patterns: Vec<String>,
    witnesses: Vec<Vec<f64>>,
}

/// Integer bound with an overflow flag; `exact` always holds the true value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountBound {
    pub exact: BigUint,
    pub value: u64,
    pub saturated: bool,
}

impl CountBound {
    fn new(exact: BigUint) -> Self {
        let (value, saturated) = match u64::try_from(&exact) {
            Ok(v) => (v, false),
            Err(_) => (u64::MAX, true),
        };
        Self { exact, value, saturated }
    }
}

fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::from(0u32);
    }
    let k = k.min(n - k);
    let mut acc = BigUint::from(1u32);
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

fn region_bound(n: usize, r: usize) -> BigUint {
    let n1 = n.saturating_sub(1) as u64;
    let sum: BigUint = (0..r as u64).map(|k| binomial(n1, k)).sum();
    sum * BigUint::from(2u32)
}

/// `2 * sum_{k < r} C(n-1, k)`: maximum number of regions cut by `n`
/// hyperplanes through the origin of an `r`-dimensional space.
pub fn upper_bound_first(n: usize, r: usize) -> Result<CountBound> {
    if n == 0 || r == 0 || r > n {
        return Err(Error::InvalidArgument(format!("need 1 <= r <= n, got n={n}, r={r}")));
    }
    Ok(CountBound::new(region_bound(n, r)))
}

/// Second-layer bound `P2bar * (2 P1)^m1` with `P2bar` evaluated at rank `m1 r`.
pub fn upper_bound_second(n: usize, r: usize, m1: usize) -> Result<CountBound> {
    if m1 == 0 {
        return Err(Error::InvalidArgument("m1 must be >= 1".into()));
    }
    let p1 = upper_bound_first(n, r)?.exact;
    let p2bar = region_bound(n, m1 * r);
    let factor = (p1 * BigUint::from(2u32)).pow(m1 as u32);
    Ok(CountBound::new(p2bar * factor))
}

/// `(2D - I) X w >= -tol` componentwise.
pub fn verify_cone<T: Scalar>(x: ArrayView2<T>, w: ArrayView1<T>, d: &ActivationPattern, tol: T) -> Result<bool> {
    if x.ncols() != w.len() || x.nrows() != d.len() {
        return Err(Error::DimensionMismatch(format!(
            "X is {}x{}, w has {}, D has {}",
            x.nrows(),
            x.ncols(),
            w.len(),
            d.len()
        )));
    }
    let xw = x.dot(&w);
    Ok(xw
        .iter()
        .enumerate()
        .all(|(i, &v)| if d.get(i) { v >= -tol } else { -v >= -tol }))
}

/// Rows of `X` as unit `f64` vectors; `None` marks an all-zero row.
fn normalized_rows<T: Scalar>(x: ArrayView2<T>) -> Vec<Option<Vec<f64>>> {
    let scale = x.iter().fold(0.0f64, |a, &v| a.max(v.to_f64_lossy().abs()));
    x.rows()
        .into_iter()
        .map(|row| {
            let v: Vec<f64> = row.iter().map(|&a| a.to_f64_lossy()).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
                None
            } else {
                Some(v.into_iter().map(|a| a / norm).collect())
            }
        })
        .collect()
}

#[derive(Clone)]
struct Node {
    signs: Vec<bool>,
    witness: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(w: &[f64]) -> Vec<f64> {
    let n = w.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n == 0.0 {
        w.to_vec()
    } else {
        w.iter().map(|a| a / n).collect()
    }
}

/// Margin of `w` against the signed rows processed so far.
fn prefix_margin(rows: &[Option<Vec<f64>>], signs: &[bool], w: &[f64]) -> f64 {
    let w = normalized(w);
    signs
        .iter()
        .zip(rows)
        .filter_map(|(&s, r)| r.as_ref().map(|r| if s { dot(r, &w) } else { -dot(r, &w) }))
        .fold(f64::INFINITY, f64::min)
}

fn strict_witness(rows: &[Option<Vec<f64>>], signs: &[bool], d: usize) -> Result<Option<Vec<f64>>> {
    let signed: Vec<Vec<f64>> = signs
        .iter()
        .zip(rows)
        .filter_map(|(&s, r)| r.as_ref().map(|r| if s { r.clone() } else { r.iter().map(|a| -a).collect() }))
        .collect();
    let (w, t) = lp::max_margin(&signed, d)?;
    if t <= 0.0 {
        return Ok(None);
    }
    let w = normalized(&w);
    if prefix_margin(rows, signs, &w) > STRICT_MARGIN {
        Ok(Some(w))
    } else {
        Ok(None)
    }
}

/// All full-dimensional cells of the central arrangement with rows `rows`,
/// as `(mask, unit witness)`. Zero rows always get bit 0.
fn enumerate_cells(rows: &[Option<Vec<f64>>], d: usize) -> Result<Vec<(Vec<bool>, Vec<f64>)>> {
    let mut frontier = vec![Node {
        signs: Vec::new(),
        witness: Vec::new(),
    }];
    for (k, row) in rows.iter().enumerate() {
        let Some(row) = row else {
            for node in &mut frontier {
                node.signs.push(false);
            }
            continue;
        };
        let children: Vec<Result<Vec<Node>>> = frontier
            .par_iter()
            .map(|node| {
                let mut out = Vec::with_capacity(2);
                for sign in [false, true] {
                    let mut signs = node.signs.clone();
                    signs.push(sign);
                    let reuse = if node.witness.is_empty() {
                        // no constraints yet: +/- the row itself
                        let w: Vec<f64> = if sign { row.clone() } else { row.iter().map(|a| -a).collect() };
                        Some(w)
                    } else {
                        let v = dot(row, &node.witness);
                        let ok = if sign { v } else { -v };
                        (ok > STRICT_MARGIN && prefix_margin(&rows[..=k], &signs, &node.witness) > STRICT_MARGIN)
                            .then(|| node.witness.clone())
                    };
                    let witness = match reuse {
                        Some(w) => Some(w),
                        None => strict_witness(&rows[..=k], &signs, d)?,
                    };
                    if let Some(witness) = witness {
                        out.push(Node { signs, witness });
                    }
                }
                Ok(out)
            })
            .collect();
        let mut next = Vec::with_capacity(frontier.len() * 2);
        for c in children {
            next.extend(c?);
        }
        frontier = next;
    }
    Ok(frontier
        .into_iter()
        .map(|n| (n.signs, n.witness))
        .collect())
}

/// Sampled directions, resampling ties so every mask comes from a witness
/// in general position.
fn sample_cells<T: Scalar>(x: ArrayView2<T>, count: usize, seed: u64) -> Vec<(ActivationPattern, Vec<f64>)> {
    let rows = normalized_rows(x);
    let d = x.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut w: Vec<f64>;
        let mut tries = 0;
        loop {
            w = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            w = normalized(&w);
            tries += 1;
            let tie = rows.iter().flatten().any(|r| dot(r, &w).abs() <= STRICT_MARGIN);
            if !tie || tries > 16 {
                break;
            }
        }
        let bits: Vec<bool> = rows
            .iter()
            .map(|r| r.as_ref().is_some_and(|r| dot(r, &w) > 0.0))
            .collect();
        out.push((ActivationPattern::from_bits(&bits), w));
    }
    out
}

fn validate_dims<T>(x: ArrayView2<T>) -> Result<()> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::InvalidArgument(format!(
            "data matrix must be nonempty, got {}x{}",
            x.nrows(),
            x.ncols()
        )));
    }
    Ok(())
}

/// First-layer arrangements of `X`. The all-zeros pattern is always included.
pub fn enumerate_first_layer<T: Scalar>(x: ArrayView2<T>, mode: Mode) -> Result<ArrangementSet> {
    validate_dims(x)?;
    let n = x.nrows();
    let d = x.ncols();
    let zero = (ActivationPattern::zeros(n), vec![0.0; d]);
    let rank = numeric_rank(x, RANK_RTOL);
    if rank == 0 {
        let source = match mode {
            Mode::Exact { .. } => Source::Exact,
            Mode::Sampled { count, seed } => Source::Sampled { seed, count },
        };
        return Ok(ArrangementSet::from_unsorted(n, vec![zero], source, true));
    }
    match mode {
        Mode::Exact { budget } => {
            let bound = upper_bound_first(n, rank)?;
            if bound.saturated || bound.value > budget as u64 {
                return Err(Error::BudgetExceeded {
                    needed: bound.exact.to_string(),
                    budget,
                });
            }
            let rows = normalized_rows(x);
            let cells = enumerate_cells(&rows, d)?;
            let mut items: Vec<_> = cells
                .into_iter()
                .map(|(bits, w)| (ActivationPattern::from_bits(&bits), w))
                .collect();
            if !items.iter().any(|(p, _)| p.is_zero()) {
                items.push(zero);
            }
            Ok(ArrangementSet::from_unsorted(n, items, Source::Exact, false))
        }
        Mode::Sampled { count, seed } => {
            let mut items = sample_cells(x, count, seed);
            if !items.iter().any(|(p, _)| p.is_zero()) {
                items.push(zero);
            }
            Ok(ArrangementSet::from_unsorted(n, items, Source::Sampled { seed, count }, false))
        }
    }
}

/// `[D_1 X, ..., D_m X]` for the given first-layer patterns.
pub fn stacked_matrix<T: Scalar>(x: ArrayView2<T>, patterns: &[&ActivationPattern]) -> Array2<T> {
    let (n, d) = x.dim();
    let mut out = Array2::<T>::zeros((n, d * patterns.len()));
    for (j, p) in patterns.iter().enumerate() {
        for i in 0..n {
            if p.get(i) {
                for c in 0..d {
                    out[[i, j * d + c]] = x[[i, c]];
                }
            }
        }
    }
    out
}

fn combinations(items: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k == 0 || k > items {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(pos) = (0..k).rev().find(|&p| idx[p] < p + items - k) else {
            return out;
        };
        idx[pos] += 1;
        for q in pos + 1..k {
            idx[q] = idx[q - 1] + 1;
        }
    }
}

/// Second-layer arrangements: patterns of `Xbar w` where
/// `Xbar = [I_1 D_1 X ... I_m1 D_m1 X]` ranges over choices of first-layer
/// patterns and signs.
///
/// In exact mode the union only needs the `m1`-subsets of distinct nonzero
/// first-layer patterns: flipping a block sign or permuting blocks leaves
/// the column space of `Xbar` unchanged, repeats add nothing, and the cells
/// of a subspace are contained in the cells of any larger subspace.
pub fn enumerate_second_layer<T: Scalar>(
    x: ArrayView2<T>,
    first: &ArrangementSet,
    m1: usize,
    mode: Mode,
) -> Result<ArrangementSet> {
    validate_dims(x)?;
    if first.is_empty() {
        return Err(Error::EmptyFirstSet);
    }
    if m1 == 0 {
        return Err(Error::InvalidArgument("m1 must be >= 1".into()));
    }
    let n = x.nrows();
    if first.n != n {
        return Err(Error::DimensionMismatch("first-layer set built for different n".into()));
    }
    let nonzero: Vec<&ActivationPattern> = first.patterns.iter().filter(|p| !p.is_zero()).collect();
    let zero = (ActivationPattern::zeros(n), Vec::new());
    match mode {
        Mode::Exact { budget } => {
            let rank = numeric_rank(x, RANK_RTOL).max(1);
            let bound = upper_bound_second(n, rank, m1)?;
            let all = if n < 64 { Some(1u64 << n) } else { None };
            let cap = match all {
                Some(a) if bound.saturated || a < bound.value => a,
                _ => bound.value,
            };
            if cap > budget as u64 {
                return Err(Error::BudgetExceeded {
                    needed: cap.to_string(),
                    budget,
                });
            }
            let mut found: BTreeSet<ActivationPattern> = BTreeSet::new();
            let mut items = vec![zero];
            let k = m1.min(nonzero.len());
            for combo in combinations(nonzero.len(), k) {
                let picked: Vec<&ActivationPattern> = combo.iter().map(|&c| nonzero[c]).collect();
                let xbar = stacked_matrix(x, &picked);
                let r = numeric_rank(xbar.view(), RANK_RTOL);
                let cells: Vec<(ActivationPattern, Vec<f64>)> = if r == n {
                    // Full row rank: every sign vector is realized.
                    full_cube(xbar.view())
                } else if r == 0 {
                    Vec::new()
                } else {
                    let rows = normalized_rows(xbar.view());
                    enumerate_cells(&rows, xbar.ncols())?
                        .into_iter()
                        .map(|(bits, w)| (ActivationPattern::from_bits(&bits), w))
                        .collect()
                };
                for (p, w) in cells {
                    if found.insert(p.clone()) {
                        items.push((p, w));
                    }
                }
                if all.is_some_and(|a| found.len() as u64 >= a) {
                    break;
                }
            }
            Ok(ArrangementSet::from_unsorted(n, items, Source::Exact, first.degenerate))
        }
        Mode::Sampled { count, seed } => {
            if nonzero.is_empty() {
                return Ok(ArrangementSet::from_unsorted(n, vec![zero], Source::Sampled { seed, count }, true));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut items = vec![zero];
            let d = x.ncols();
            for _ in 0..count {
                let picked: Vec<&ActivationPattern> = (0..m1)
                    .map(|_| nonzero[rand::Rng::gen_range(&mut rng, 0..nonzero.len())])
                    .collect();
                let xbar = stacked_matrix(x, &picked);
                let w: Vec<f64> = (0..m1 * d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let wv = Array1::from_iter(w.iter().map(|&a| T::of(a)));
                let v = xbar.dot(&wv);
                let bits: Vec<bool> = v.iter().map(|&a| a > T::zero()).collect();
                items.push((ActivationPattern::from_bits(&bits), normalized(&w)));
            }
            Ok(ArrangementSet::from_unsorted(n, items, Source::Sampled { seed, count }, false))
        }
    }
}

/// Every mask, with the least-norm solution of `Xbar w = (2D - I) 1` as witness.
fn full_cube<T: Scalar>(xbar: ArrayView2<T>) -> Vec<(ActivationPattern, Vec<f64>)> {
    let n = xbar.nrows();
    let xf = xbar.mapv(|a| a.to_f64_lossy());
    let gram = xf.dot(&xf.t());
    (0..1u64 << n)
        .map(|m| {
            let bits: Vec<bool> = (0..n).map(|i| m >> i & 1 == 1).collect();
            let target: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
            let w = crate::linalg::cholesky_solve(gram.view(), &target)
                .map(|alpha| xf.t().dot(&Array1::from(alpha)).to_vec())
                .unwrap_or_default();
            (ActivationPattern::from_bits(&bits), normalized(&w))
        })
        .collect()
}

/// First-layer choices for the convex program: each entry assigns one
/// pattern (index into `patterns`) to every first-hidden-layer neuron.
#[derive(Clone, Debug, PartialEq)]
pub struct FirstLayerGrid {
    pub patterns: ArrangementSet,
    pub tuples: Vec<Vec<usize>>,
    /// True when `tuples` is closed under permutation of neurons.
    pub symmetric: bool,
}

impl FirstLayerGrid {
    /// Every neuron of a block shares the same pattern `D_1i`.
    pub fn shared(first: &ArrangementSet, m1: usize) -> Self {
        Self {
            patterns: first.clone(),
            tuples: (0..first.len()).map(|i| vec![i; m1]).collect(),
            symmetric: true,
        }
    }

    /// All ordered `m1`-tuples of nonzero patterns (lexicographic). A neuron
    /// with the zero pattern contributes nothing, and a zero weight column
    /// is feasible in any cone, so the zero pattern is left out.
    pub fn ordered(first: &ArrangementSet, m1: usize) -> Self {
        let nonzero: Vec<usize> = (0..first.len()).filter(|&i| !first.patterns[i].is_zero()).collect();
        let mut tuples = vec![Vec::with_capacity(m1)];
        for _ in 0..m1 {
            let mut next = Vec::with_capacity(tuples.len() * nonzero.len());
            for t in &tuples {
                for &p in &nonzero {
                    let mut t2: Vec<usize> = t.clone();
                    t2.push(p);
                    next.push(t2);
                }
            }
            tuples = next;
        }
        if nonzero.is_empty() {
            tuples.clear();
        }
        Self {
            patterns: first.clone(),
            tuples,
            symmetric: true,
        }
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn m1(&self) -> usize {
        self.tuples.first().map_or(0, |t| t.len())
    }

    pub fn pattern(&self, i: usize, j: usize) -> &ActivationPattern {
        &self.patterns.patterns[self.tuples[i][j]]
    }
}

/// Draws from random networks until finding `p1` distinct first-layer
/// tuples and `p2` distinct second-layer patterns (or giving up after
/// `SAMPLE_DRAW_FACTOR * max(p1, p2)` draws). Each draw of `W1 (d x m1)` and
/// `w2 (m1)` yields the tuple of first-layer masks of `X W1` and the
/// second-layer mask of `relu(X W1) w2`.
pub fn sample_network_arrangements<T: Scalar>(
    x: ArrayView2<T>,
    m1: usize,
    p1: usize,
    p2: usize,
    seed: u64,
) -> Result<(FirstLayerGrid, ArrangementSet)> {
    validate_dims(x)?;
    if m1 == 0 || p1 == 0 || p2 == 0 {
        return Err(Error::InvalidArgument("sampling needs m1, p1, p2 >= 1".into()));
    }
    let (n, d) = x.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tuple_masks: Vec<Vec<ActivationPattern>> = Vec::new();
    let mut seen_tuples: BTreeSet<Vec<ActivationPattern>> = BTreeSet::new();
    let mut single: Vec<(ActivationPattern, Vec<f64>)> = Vec::new();
    let mut second: Vec<(ActivationPattern, Vec<f64>)> = Vec::new();
    let mut seen_second: BTreeSet<ActivationPattern> = BTreeSet::new();
    let max_draws = SAMPLE_DRAW_FACTOR * p1.max(p2);
    for _ in 0..max_draws {
        if tuple_masks.len() >= p1 && second.len() >= p2 {
            break;
        }
        let w1 = Array2::from_shape_fn((d, m1), |_| T::of(StandardNormal.sample(&mut rng)));
        let w2 = Array1::from_shape_fn(m1, |_| T::of(StandardNormal.sample(&mut rng)));
        let pre1 = x.dot(&w1);
        let masks: Vec<ActivationPattern> = (0..m1)
            .map(|j| {
                let bits: Vec<bool> = pre1.column(j).iter().map(|&v| v > T::zero()).collect();
                ActivationPattern::from_bits(&bits)
            })
            .collect();
        if tuple_masks.len() < p1 && seen_tuples.insert(masks.clone()) {
            for (j, p) in masks.iter().enumerate() {
                let wj: Vec<f64> = w1.column(j).iter().map(|a| a.to_f64_lossy()).collect();
                single.push((p.clone(), normalized(&wj)));
            }
            tuple_masks.push(masks);
        }
        let h = pre1.mapv(crate::scalar::relu);
        let pre2 = h.dot(&w2);
        let bits: Vec<bool> = pre2.iter().map(|&v| v > T::zero()).collect();
        let p = ActivationPattern::from_bits(&bits);
        if second.len() < p2 && seen_second.insert(p.clone()) {
            second.push((p, Vec::new()));
        }
    }
    let source = Source::Sampled { seed, count: p1 };
    let patterns = ArrangementSet::from_unsorted(n, single, source, false);
    let tuples: Vec<Vec<usize>> = tuple_masks
        .iter()
        .map(|ms| ms.iter().map(|p| patterns.position(p).expect("pattern recorded")).collect())
        .collect();
    let second = ArrangementSet::from_unsorted(n, second, Source::Sampled { seed, count: p2 }, false);
    Ok((
        FirstLayerGrid {
            patterns,
            tuples,
            symmetric: false,
        },
        second,
    ))
}

/// Draw cap per requested pattern in [`sample_network_arrangements`].
pub const SAMPLE_DRAW_FACTOR: usize = 1000;

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hex_roundtrip_and_order() {
        let p = ActivationPattern::from_bits(&[true, false]);
        assert_eq!(p.to_hex(), "8");
        assert_eq!(ActivationPattern::from_hex(2, "8").unwrap(), p);
        let q = ActivationPattern::from_bits(&[false, true, true, false, true]);
        assert_eq!(q.to_hex(), "68");
        assert_eq!(ActivationPattern::from_hex(5, &q.to_hex()).unwrap(), q);
        assert!(ActivationPattern::from_bits(&[false, true]) < p);
        assert!(ActivationPattern::from_hex(2, "1").is_err());
    }

    #[test]
    fn two_opposite_points() {
        let x = array![[1.0], [-1.0]];
        let set = enumerate_first_layer(x.view(), Mode::exact()).unwrap();
        let masks: Vec<String> = set.patterns.iter().map(|p| p.to_string()).collect();
        assert_eq!(masks, vec!["00", "01", "10"]);
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        let x = Array2::<f64>::zeros((4, 3));
        let set = enumerate_first_layer(x.view(), Mode::exact()).unwrap();
        assert_eq!(set.len(), 1);
        assert!(set.patterns[0].is_zero());
        assert!(set.degenerate);
    }

    #[test]
    fn bounds_match_formula() {
        assert_eq!(upper_bound_first(2, 1).unwrap().value, 2);
        assert_eq!(upper_bound_first(3, 2).unwrap().value, 6);
        assert!(upper_bound_first(3, 4).is_err());
        let big = upper_bound_second(400, 20, 12).unwrap();
        assert!(big.saturated);
        assert!(big.exact > BigUint::from(u64::MAX));
    }

    #[test]
    fn cone_check_examples() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let w = array![2.0, -3.0];
        let d10 = ActivationPattern::from_bits(&[true, false]);
        let d11 = ActivationPattern::from_bits(&[true, true]);
        assert!(verify_cone(x.view(), w.view(), &d10, 0.0).unwrap());
        assert!(!verify_cone(x.view(), w.view(), &d11, 0.0).unwrap());
        assert!(verify_cone(x.view(), array![1.0].view(), &d10, 0.0).is_err());
    }

    #[test]
    fn budget_is_enforced() {
        let x = Array2::from_shape_fn((12, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * j as f64);
        let err = enumerate_first_layer(x.view(), Mode::Exact { budget: 10 }).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { .. }));
    }

    #[test]
    fn second_layer_needs_first() {
        let x = array![[1.0], [-1.0]];
        let empty = ArrangementSet::from_patterns(2, vec![], Source::Exact).unwrap();
        assert!(matches!(
            enumerate_second_layer(x.view(), &empty, 1, Mode::exact()),
            Err(Error::EmptyFirstSet)
        ));
    }

    #[test]
    fn json_roundtrip() {
        let x = array![[1.0, 0.2], [-1.0, 0.5], [0.3, -1.0]];
        let set = enumerate_first_layer(x.view(), Mode::exact()).unwrap();
        let back = ArrangementSet::from_json(&set.to_json().unwrap()).unwrap();
        assert_eq!(back, set);
        let s = enumerate_first_layer(x.view(), Mode::Sampled { count: 50, seed: 3 }).unwrap();
        let back = ArrangementSet::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn combinations_enumerate() {
        assert_eq!(combinations(4, 2).len(), 6);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
        assert_eq!(combinations(5, 1).len(), 5);
        assert!(combinations(2, 3).is_empty());
    }

    #[test]
    fn sign_patterns() {
        let all = all_sign_patterns(3);
        assert_eq!(all.len(), 8);
        assert_eq!(all[0].signs(), &[1, 1, 1]);
        assert_eq!(all[7].signs(), &[-1, -1, -1]);
        let some = sample_sign_patterns(6, 5, 1);
        assert_eq!(some.len(), 5);
        assert!(some.iter().any(|s| s.signs().iter().all(|&v| v == 1)));
        assert!(some.iter().any(|s| s.signs().iter().all(|&v| v == -1)));
        assert!(SignPattern::new(vec![1, 0]).is_err());
    }
}
