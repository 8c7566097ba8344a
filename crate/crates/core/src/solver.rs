//! First-order solver for the convex program and its duality-gap certificate.
//!
//! The default method keeps every block inside its cone: the prox of
//! `mu |u|_F + indicator(C_b)` is group soft-thresholding of the Euclidean
//! projection onto `C_b`. Blocks enter a working set when they violate the
//! zero-block optimality condition `|P_C(-sigma A_b^T g)| <= mu`, and the
//! subproblem on the working set is solved by monotone FISTA with restarts.
//!
//! The penalty method instead adds `lambda * h_C` (sum of relu constraint
//! violations) to the smooth part through its subgradient and escalates
//! `lambda` geometrically.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cone;
use crate::convex_program::{frob, ConvexProgram, ConvexVariables};
use crate::error::{Error, Result};
use crate::loss::Loss;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Projected,
    Penalty,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepRule {
    /// Step `1/L` with `L` estimated from the working-set Gram matrix.
    Fixed,
    /// Start each iteration from a larger trial step and shrink `L` by
    /// `1/factor` until the sufficient-decrease test passes.
    Backtracking { factor: f64, max_tries: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSchedule {
    Fixed,
    Geometric { multiplier: f64, rounds: usize },
}

/// How the dual constraint `max_b |.| <= mu` is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualBound {
    /// `|P_{C_b}(-sigma A_b^T v)|`: tight at the optimum.
    #[default]
    Exact,
    /// `|A_b^T v|`: cone dropped, always valid but looser.
    Relaxed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub method: Method,
    /// Cap on proximal iterations (all rounds together).
    pub max_iters: usize,
    /// Cap on working-set rounds.
    pub max_outer: usize,
    pub step: StepRule,
    pub lambda: f64,
    pub lambda_schedule: LambdaSchedule,
    pub tol_obj: f64,
    pub tol_constraint: f64,
    /// Target relative duality gap.
    pub tol_gap: f64,
    pub dual: DualBound,
    /// Initial smoothing for the nonsmooth losses (0 picks a default).
    pub smoothing: f64,
    /// Seeds the power iteration behind the step-size estimate.
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            method: Method::Projected,
            max_iters: 200_000,
            max_outer: 500,
            step: StepRule::Backtracking {
                factor: 0.5,
                max_tries: 60,
            },
            lambda: 1e-5,
            lambda_schedule: LambdaSchedule::Geometric {
                multiplier: 10.0,
                rounds: 8,
            },
            tol_obj: 1e-12,
            tol_constraint: 1e-6,
            tol_gap: 1e-7,
            dual: DualBound::Exact,
            smoothing: 0.0,
            seed: 0,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.tol_obj, self.tol_constraint, self.tol_gap];
        if positive.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        if !(self.lambda >= 0.0) || self.smoothing < 0.0 {
            return Err(Error::InvalidArgument("lambda and smoothing must be nonnegative".into()));
        }
        if let StepRule::Backtracking { factor, max_tries } = self.step {
            if !(factor > 0.0 && factor < 1.0) || max_tries == 0 {
                return Err(Error::InvalidArgument("backtracking factor must be in (0, 1)".into()));
            }
        }
        if let LambdaSchedule::Geometric { multiplier, .. } = self.lambda_schedule {
            if !(multiplier > 1.0) {
                return Err(Error::InvalidArgument("lambda multiplier must exceed 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub group_norm: f64,
    pub constraint_total: f64,
    pub step: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub rows: Vec<TraceRow>,
    pub converged: bool,
    pub outer_rounds: usize,
    pub lambda_final: f64,
    pub active_blocks: usize,
    pub rel_gap: Option<f64>,
    pub lower_bound: Option<f64>,
    pub constraint_total: f64,
    pub seconds: f64,
}

impl SolveTrace {
    pub fn final_objective(&self) -> Option<f64> {
        self.rows.last().map(|r| r.objective)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "objective", "group_norm", "constraint_total", "step"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(&[
                r.iter.to_string(),
                r.objective.to_string(),
                r.group_norm.to_string(),
                r.constraint_total.to_string(),
                r.step.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv {
        row: 0,
        col: 0,
        msg: e.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualCertificate {
    pub primal: f64,
    pub lower_bound: f64,
    pub rel_gap: f64,
    /// Largest block score of the unscaled dual candidate.
    pub max_score: f64,
}

/// `block * max(0, 1 - t / |block|_F)`.
pub fn group_soft_threshold<T: Scalar>(block: &Array2<T>, threshold: T) -> Array2<T> {
    let norm = frob(block);
    if norm <= threshold || norm == T::zero() {
        return Array2::zeros(block.raw_dim());
    }
    block * (T::one() - threshold / norm)
}

/// Loss with optional smoothing `delta` of the nonsmooth cases:
/// `sqrt(|r|^2 + delta^2)` for the norm loss, a quadratic knee of width
/// `delta` for the hinge.
#[derive(Clone, Copy, Debug)]
struct SmoothLoss {
    loss: Loss,
    delta: f64,
}

impl SmoothLoss {
    fn value<T: Scalar>(&self, f: ArrayView1<T>, y: ArrayView1<T>) -> T {
        let dl = T::of(self.delta);
        match self.loss {
            Loss::L2Norm if self.delta > 0.0 => {
                let r = &f - &y;
                (r.dot(&r) + dl * dl).sqrt()
            }
            Loss::Hinge if self.delta > 0.0 => f
                .iter()
                .zip(y)
                .map(|(&p, &t)| {
                    let m = T::one() - t * p;
                    if m <= T::zero() {
                        T::zero()
                    } else if m >= dl {
                        m - dl / T::of(2.0)
                    } else {
                        m * m / (T::of(2.0) * dl)
                    }
                })
                .sum(),
            loss => loss.value(f, y),
        }
    }

    fn gradient<T: Scalar>(&self, f: ArrayView1<T>, y: ArrayView1<T>) -> Array1<T> {
        let dl = T::of(self.delta);
        match self.loss {
            Loss::L2Norm if self.delta > 0.0 => {
                let r = &f - &y;
                let s = (r.dot(&r) + dl * dl).sqrt();
                r / s
            }
            Loss::Hinge if self.delta > 0.0 => Array1::from_iter(f.iter().zip(y).map(|(&p, &t)| {
                let m = T::one() - t * p;
                if m <= T::zero() {
                    T::zero()
                } else if m >= dl {
                    -t
                } else {
                    -t * m / dl
                }
            })),
            loss => loss.gradient(f, y),
        }
    }

    /// Curvature bound of the loss in `f`.
    fn curvature(&self, residual_norm: f64) -> f64 {
        match self.loss {
            Loss::Squared => 1.0,
            Loss::Logistic => 0.25,
            Loss::L2Norm => 1.0 / residual_norm.max(self.delta).max(1e-300),
            Loss::Hinge => 1.0 / self.delta.max(1e-300),
        }
    }

    /// `L*(v)`; `None` when the loss has no closed-form conjugate.
    fn conjugate<T: Scalar>(&self, v: ArrayView1<T>, y: ArrayView1<T>) -> Option<T> {
        match self.loss {
            Loss::Squared => Some(v.dot(&y) + T::of(0.5) * v.dot(&v)),
            Loss::L2Norm => {
                let nv = v.dot(&v);
                if nv > T::one() + T::of(1e-12) {
                    return Some(T::infinity());
                }
                let slack = (T::one() - nv).max(T::zero()).sqrt();
                Some(v.dot(&y) - T::of(self.delta) * slack)
            }
            Loss::Logistic => {
                let xlogx = |a: T| if a <= T::zero() { T::zero() } else { a * a.ln() };
                let mut total = T::zero();
                for (&vi, &yi) in v.iter().zip(y) {
                    let a = -vi * yi;
                    if a < -T::of(1e-12) || a > T::one() + T::of(1e-12) {
                        return Some(T::infinity());
                    }
                    let a = a.max(T::zero()).min(T::one());
                    total += xlogx(a) + xlogx(T::one() - a);
                }
                Some(total)
            }
            Loss::Hinge => None,
        }
    }
}

/// Per-block work shared by the solver and the certificate.
struct Engine<'a, T: Scalar> {
    prog: &'a ConvexProgram<T>,
    /// Cone rows and their Gram matrix, per block.
    rows: Vec<OnceLock<(Array2<T>, Array2<T>)>>,
    mu: T,
    nb: usize,
}

struct Scores<T> {
    max: T,
    /// Violating sides `(B, score)`, best first.
    top: Vec<(usize, T)>,
}

fn flat<T: Scalar>(u: &Array2<T>) -> Array1<T> {
    Array1::from_iter(u.t().iter().copied())
}

fn unflat<T: Scalar>(v: Array1<T>, d: usize, m1: usize) -> Array2<T> {
    v.into_shape_with_order((m1, d))
        .expect("block size")
        .reversed_axes()
        .as_standard_layout()
        .to_owned()
}

impl<'a, T: Scalar> Engine<'a, T> {
    fn new(prog: &'a ConvexProgram<T>) -> Self {
        let nb = prog.num_blocks();
        Self {
            prog,
            rows: (0..nb).map(|_| OnceLock::new()).collect(),
            mu: prog.mu(),
            nb,
        }
    }

    fn sigma(&self, side: usize) -> T {
        if side < self.nb {
            T::one()
        } else {
            -T::one()
        }
    }

    fn key(&self, side: usize) -> crate::convex_program::BlockKey {
        self.prog.blocks()[side % self.nb]
    }

    fn cone(&self, side: usize) -> &(Array2<T>, Array2<T>) {
        let k = side % self.nb;
        self.rows[k].get_or_init(|| {
            let rows = self.prog.cone_rows(self.prog.blocks()[k]);
            let gram = rows.dot(&rows.t());
            (rows, gram)
        })
    }

    fn project(&self, side: usize, w: &Array2<T>) -> Array2<T> {
        let (rows, gram) = self.cone(side);
        let p = cone::project_with_gram(rows.view(), gram.view(), flat(w).view());
        unflat(p, self.prog.d(), self.prog.m1())
    }

    /// `sum_{B in set} sigma_B A_B u_B`, fixed reduction order.
    fn fit(&self, set: &[usize], u: &[Array2<T>]) -> Array1<T> {
        let n = self.prog.n();
        let parts: Vec<Array1<T>> = set
            .par_iter()
            .zip(u.par_iter())
            .with_min_len(64)
            .fold_chunks(64, || Array1::zeros(n), |mut acc, (&side, ub)| {
                if ub.iter().any(|&v| v != T::zero()) {
                    let a = self.prog.apply_block(self.key(side), ub.view());
                    acc.scaled_add(self.sigma(side), &a);
                }
                acc
            })
            .collect();
        parts.into_iter().fold(Array1::zeros(n), |a, p| a + p)
    }

    /// Block scores `|P_C(-sigma A_b^T v)|` (or the relaxed `|A_b^T v|`).
    /// Computes the exact maximum and up to `want` violators (`> mu`) among
    /// sides not flagged in `skip`, visiting sides by decreasing upper bound.
    fn scores(&self, v: &Array1<T>, bound: DualBound, want: usize, skip: &[bool]) -> Scores<T> {
        let grads: Vec<Array2<T>> = self
            .prog
            .blocks()
            .par_iter()
            .map(|&b| self.prog.apply_block_t(b, v.view()))
            .collect();
        let mut order: Vec<(usize, T)> = grads
            .iter()
            .enumerate()
            .flat_map(|(k, g)| {
                let ub = frob(g);
                [(k, ub), (k + self.nb, ub)]
            })
            .collect();
        order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));

        let mut max = T::zero();
        let mut top: Vec<(usize, T)> = Vec::new();
        let score_of = |side: usize| -> T {
            let g = &grads[side % self.nb];
            match bound {
                DualBound::Relaxed => frob(g),
                DualBound::Exact => {
                    let w = g * (-self.sigma(side));
                    frob(&self.project(side, &w))
                }
            }
        };
        let mut pos = 0;
        const CHUNK: usize = 64;
        while pos < order.len() {
            let next_ub = order[pos].1;
            let kth = if top.len() >= want { top[want - 1].1 } else { T::zero() };
            let need_max = next_ub > max;
            let need_top = next_ub > self.mu && (top.len() < want || next_ub > kth);
            if !need_max && !need_top {
                break;
            }
            let end = (pos + CHUNK).min(order.len());
            let chunk: Vec<(usize, T)> = order[pos..end]
                .par_iter()
                .map(|&(side, ub)| if ub > T::zero() { (side, score_of(side)) } else { (side, T::zero()) })
                .collect();
            for (side, s) in chunk {
                max = max.max(s);
                if s > self.mu && !skip[side] {
                    top.push((side, s));
                }
            }
            top.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
            top.truncate(want.max(1));
            pos = end;
        }
        Scores { max, top }
    }

    fn regularizer(&self, u: &[Array2<T>]) -> T {
        self.mu * u.iter().map(frob).sum::<T>()
    }

    /// Lower bound from the dual candidate `v`, scaled into the dual feasible set.
    fn lower_bound(&self, sl: &SmoothLoss, v: &Array1<T>, max_score: T) -> Option<T> {
        let scale = if max_score > self.mu { self.mu / max_score } else { T::one() };
        let vs = v * scale;
        sl.conjugate(vs.view(), self.prog.y()).map(|c| -c)
    }

    /// Largest eigenvalue of `sum_{B in set} A_B A_B^T` by power iteration.
    fn lipschitz(&self, set: &[usize], seed: u64) -> T {
        let mut ks: Vec<usize> = set.iter().map(|&s| s % self.nb).collect();
        ks.sort_unstable();
        let dup: Vec<usize> = ks.clone();
        ks.dedup();
        let gram = self.prog.gram_sum(&ks);
        // each key can appear on both sides
        let mult = if dup.len() > ks.len() { T::of(2.0) } else { T::one() };
        let n = gram.nrows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array1::from_shape_fn(n, |_| T::of(StandardNormal.sample(&mut rng)));
        let mut lam = T::zero();
        for _ in 0..200 {
            let nx = x.dot(&x).sqrt();
            if nx == T::zero() {
                return T::zero();
            }
            x /= nx;
            let y = gram.dot(&x);
            let new = x.dot(&y);
            x = y;
            if (new - lam).abs() <= T::of(1e-10) * new.abs() {
                lam = new;
                break;
            }
            lam = new;
        }
        // Power iteration approaches from below; pad and never undercut the trace bound share.
        let trace: T = (0..n).map(|i| gram[[i, i]]).sum();
        (lam * T::of(1.01)).min(trace).max(lam) * mult
    }
}

/// Certificate for `vars` with the cone-aware dual bound.
pub fn duality_gap<T: Scalar>(prog: &ConvexProgram<T>, vars: &ConvexVariables<T>) -> Result<DualCertificate> {
    duality_gap_with(prog, vars, DualBound::Exact)
}

/// Weak-duality certificate: with `v = grad loss(fit)` scaled so that every
/// block score is at most `beta / sqrt(m2)`, `-L*(v)` lower-bounds the
/// optimal value.
pub fn duality_gap_with<T: Scalar>(
    prog: &ConvexProgram<T>,
    vars: &ConvexVariables<T>,
    bound: DualBound,
) -> Result<DualCertificate> {
    let sl = SmoothLoss {
        loss: prog.loss(),
        delta: 0.0,
    };
    if prog.loss() == Loss::Hinge {
        return Err(Error::UnsupportedLoss("hinge"));
    }
    let engine = Engine::new(prog);
    let fit = prog.fit_value(vars)?;
    let primal = sl.value(fit.view(), prog.y()) + prog.regularizer(vars);
    let v = sl.gradient(fit.view(), prog.y());
    let skip = vec![true; 2 * engine.nb];
    let sc = engine.scores(&v, bound, 1, &skip);
    let lower = engine.lower_bound(&sl, &v, sc.max).expect("conjugate available");
    let primal = primal.to_f64_lossy();
    let lower = lower.to_f64_lossy().min(primal);
    Ok(DualCertificate {
        primal,
        lower_bound: lower,
        rel_gap: (primal - lower) / primal.abs().max(1.0),
        max_score: sc.max.to_f64_lossy(),
    })
}

/// Minimizes the program. Returns the final variables and trace; the trace
/// carries the certificate when the loss admits one.
pub fn solve<T: Scalar>(prog: &ConvexProgram<T>, opts: &SolveOptions) -> Result<(ConvexVariables<T>, SolveTrace)> {
    opts.validate()?;
    let start = Instant::now();
    let (vars, mut trace) = match opts.method {
        Method::Projected => solve_projected(prog, opts)?,
        Method::Penalty => solve_penalty(prog, opts)?,
    };
    trace.constraint_total = prog.constraint_residuals(&vars)?.total.to_f64_lossy();
    if prog.loss() != Loss::Hinge {
        let cert = duality_gap_with(prog, &vars, opts.dual)?;
        trace.rel_gap = Some(cert.rel_gap);
        trace.lower_bound = Some(cert.lower_bound);
        if opts.method == Method::Projected {
            trace.converged = trace.converged && cert.rel_gap <= opts.tol_gap;
        }
    }
    trace.active_blocks = vars.support();
    trace.seconds = start.elapsed().as_secs_f64();
    Ok((vars, trace))
}

struct Inner<'e, 'a, T: Scalar> {
    engine: &'e Engine<'a, T>,
    set: Vec<usize>,
    sl: SmoothLoss,
    lip: T,
}

impl<T: Scalar> Inner<'_, '_, T> {
    fn smooth(&self, fit: &Array1<T>) -> T {
        self.sl.value(fit.view(), self.engine.prog.y())
    }

    fn grad(&self, fit: &Array1<T>) -> (Array1<T>, Vec<Array2<T>>) {
        let g = self.sl.gradient(fit.view(), self.engine.prog.y());
        let blocks = self
            .set
            .par_iter()
            .map(|&side| self.engine.prog.apply_block_t(self.engine.key(side), g.view()) * self.engine.sigma(side))
            .collect();
        (g, blocks)
    }

    fn prox(&self, y: &[Array2<T>], grad: &[Array2<T>], step: T) -> Vec<Array2<T>> {
        let thr = step * self.engine.mu;
        self.set
            .par_iter()
            .zip(y.par_iter().zip(grad.par_iter()))
            .map(|(&side, (yb, gb))| {
                let w = yb - &(gb * step);
                group_soft_threshold(&self.engine.project(side, &w), thr)
            })
            .collect()
    }
}

fn dot_blocks<T: Scalar>(a: &[Array2<T>], b: &[Array2<T>]) -> T {
    a.iter().zip(b).map(|(x, y)| (x * y).sum()).sum()
}

fn diff_blocks<T: Scalar>(a: &[Array2<T>], b: &[Array2<T>]) -> Vec<Array2<T>> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Inner iterations allowed in working-set round `k` (0-based): `ROUND_ITERS * (k + 1)`.
const ROUND_ITERS: usize = 500;

/// Iterations without a visible objective decrease before giving up on a subproblem.
const STALL_LIMIT: usize = 300;

struct InnerResult {
    iters: usize,
    /// The objective stopped moving before the gap target was met.
    stalled: bool,
}

/// Monotone FISTA with restart on the working set. `x` is aligned with
/// `inner.set` and updated in place.
#[allow(clippy::too_many_arguments)]
fn run_inner<T: Scalar>(
    inner: &Inner<'_, '_, T>,
    x: &mut Vec<Array2<T>>,
    opts: &SolveOptions,
    budget: usize,
    tol_abs: f64,
    iter0: usize,
    trace: &mut SolveTrace,
    lip_state: &mut T,
) -> Result<InnerResult> {
    let engine = inner.engine;
    let y_data = engine.prog.y();
    let mut fit_x = engine.fit(&inner.set, x);
    let mut f_x = inner.smooth(&fit_x) + engine.regularizer(x);
    let mut y = x.clone();
    let mut fit_y = fit_x.clone();
    let mut t = T::one();
    let mut lip = if *lip_state > T::zero() { *lip_state } else { inner.lip };
    let mut stall = 0usize;
    let check_every = 10;
    for it in 0..budget {
        let (_, gy) = inner.grad(&fit_y);
        let smooth_y = inner.smooth(&fit_y);
        let (z, fit_z, step) = match opts.step {
            StepRule::Fixed => {
                let step = T::one() / inner.lip;
                let z = inner.prox(&y, &gy, step);
                let fit_z = engine.fit(&inner.set, &z);
                (z, fit_z, step)
            }
            StepRule::Backtracking { factor, max_tries } => {
                lip = (lip * T::of(factor)).max(inner.lip * T::of(1e-8));
                let mut tries = 0;
                loop {
                    let step = T::one() / lip;
                    let z = inner.prox(&y, &gy, step);
                    let fit_z = engine.fit(&inner.set, &z);
                    let dz = diff_blocks(&z, &y);
                    let model = smooth_y + dot_blocks(&gy, &dz) + lip * T::of(0.5) * dot_blocks(&dz, &dz);
                    let actual = inner.smooth(&fit_z);
                    let slack = T::of(1e-13) * smooth_y.abs().max(T::one());
                    tries += 1;
                    if actual <= model + slack || tries >= max_tries || lip >= inner.lip * T::of(1e6) {
                        break (z, fit_z, step);
                    }
                    lip = lip / T::of(factor);
                }
            }
        };
        let f_z = inner.smooth(&fit_z) + engine.regularizer(&z);
        if !f_z.is_finite() {
            return Err(Error::Divergence {
                iter: iter0 + it,
                objective: f_z.to_f64_lossy(),
            });
        }
        let t_next = (T::one() + (T::one() + T::of(4.0) * t * t).sqrt()) / T::of(2.0);
        let improved = f_z <= f_x;
        let x_prev = std::mem::take(x);
        let (x_new, fit_new, f_new) = if improved {
            (z.clone(), fit_z.clone(), f_z)
        } else {
            (x_prev.clone(), fit_x.clone(), f_x)
        };
        // y = x_new + (t/t')(z - x_new) + ((t-1)/t')(x_new - x_prev)
        let a = t / t_next;
        let b = (t - T::one()) / t_next;
        let restart = !improved;
        y = if restart {
            x_new.clone()
        } else {
            x_new
                .iter()
                .zip(z.iter().zip(&x_prev))
                .map(|(xn, (zb, xp))| xn + &((zb - xn) * a) + &((xn - xp) * b))
                .collect()
        };
        t = if restart { T::one() } else { t_next };
        let change = (f_x - f_new).to_f64_lossy();
        *x = x_new;
        let fit_prev = std::mem::replace(&mut fit_x, fit_new);
        f_x = f_new;
        fit_y = if restart {
            fit_x.clone()
        } else {
            // fit is linear in the blocks
            &fit_x + &((&fit_z - &fit_x) * a) + &((&fit_x - &fit_prev) * b)
        };

        let group: T = x.iter().map(frob).sum();
        let cons: T = inner
            .set
            .iter()
            .zip(x.iter())
            .map(|(&side, u)| engine.prog.block_violation(engine.key(side), u))
            .sum();
        let true_obj = inner.sl_true_value(&fit_x, y_data) + engine.mu * group;
        trace.rows.push(TraceRow {
            iter: iter0 + it,
            objective: true_obj.to_f64_lossy(),
            group_norm: group.to_f64_lossy(),
            constraint_total: cons.to_f64_lossy(),
            step: step.to_f64_lossy(),
        });

        if change.abs() <= opts.tol_obj * f_x.to_f64_lossy().abs().max(1.0) {
            stall += 1;
        } else {
            stall = 0;
        }
        if (it + 1) % check_every == 0 || stall >= 50 {
            // Gap of the subproblem restricted to the working set.
            let v = inner.sl.gradient(fit_x.view(), y_data);
            let max = inner
                .set
                .iter()
                .map(|&side| {
                    let g = engine.prog.apply_block_t(engine.key(side), v.view()) * (-engine.sigma(side));
                    frob(&engine.project(side, &g))
                })
                .fold(T::zero(), T::max);
            if let Some(lower) = engine.lower_bound(&inner.sl, &v, max) {
                let gap = (f_x - lower).to_f64_lossy();
                if gap <= tol_abs {
                    *lip_state = lip;
                    return Ok(InnerResult {
                        iters: it + 1,
                        stalled: false,
                    });
                }
            } else if stall >= 50 {
                *lip_state = lip;
                return Ok(InnerResult {
                    iters: it + 1,
                    stalled: false,
                });
            }
        }
        if stall >= STALL_LIMIT {
            *lip_state = lip;
            return Ok(InnerResult {
                iters: it + 1,
                stalled: true,
            });
        }
    }
    *lip_state = lip;
    Ok(InnerResult {
        iters: budget,
        stalled: false,
    })
}

impl<T: Scalar> Inner<'_, '_, T> {
    fn sl_true_value(&self, fit: &Array1<T>, y: ArrayView1<T>) -> T {
        self.sl.loss.value(fit.view(), y)
    }
}

fn solve_projected<T: Scalar>(prog: &ConvexProgram<T>, opts: &SolveOptions) -> Result<(ConvexVariables<T>, SolveTrace)> {
    let engine = Engine::new(prog);
    let nb = engine.nb;
    let d = prog.d();
    let m1 = prog.m1();
    let y = prog.y();
    let ynorm = y.dot(&y).sqrt().to_f64_lossy();
    let nonsmooth = matches!(prog.loss(), Loss::L2Norm | Loss::Hinge);
    let delta_min = if nonsmooth { 1e-3 * opts.tol_gap * ynorm.max(1.0) } else { 0.0 };
    let mut delta = if nonsmooth {
        if opts.smoothing > 0.0 {
            opts.smoothing
        } else {
            1e-2 * ynorm.max(1.0)
        }
    } else {
        0.0
    };

    let mut u: Vec<Array2<T>> = vec![Array2::zeros((d, m1)); 2 * nb];
    let mut in_set = vec![false; 2 * nb];
    let mut set: Vec<usize> = Vec::new();
    let mut trace = SolveTrace {
        lambda_final: 0.0,
        ..Default::default()
    };
    let mut iters = 0usize;
    let mut lip_state = T::zero();
    let mut converged = false;
    let add_per_round = 16usize;

    for outer in 0..opts.max_outer.max(1) {
        trace.outer_rounds = outer + 1;
        let sl = SmoothLoss { loss: prog.loss(), delta };
        let current: Vec<Array2<T>> = set.iter().map(|&s| u[s].clone()).collect();
        let fit = engine.fit(&set, &current);
        let v = sl.gradient(fit.view(), y);
        let want = add_per_round.max(set.len() / 2);
        let sc = engine.scores(&v, DualBound::Exact, want, &in_set);
        let f_now = (sl.value(fit.view(), y) + engine.regularizer(&current)).to_f64_lossy();
        let tol_abs = opts.tol_gap * f_now.abs().max(1.0);
        let gap_now = engine.lower_bound(&sl, &v, sc.max).map(|lower| f_now - lower.to_f64_lossy());
        let gap_ok = match gap_now {
            Some(g) => g <= 0.5 * tol_abs,
            None => sc.top.is_empty(),
        };
        if gap_ok {
            if delta > delta_min {
                delta = (delta * 0.1).max(delta_min);
                if delta <= delta_min * 1.0001 {
                    delta = delta_min;
                }
                lip_state = T::zero();
                continue;
            }
            converged = true;
            break;
        }
        // Drop zero blocks that no longer violate, then add the top violators.
        let mut keep = Vec::with_capacity(set.len());
        for &s in &set {
            if u[s].iter().any(|&v| v != T::zero()) {
                keep.push(s);
            } else {
                in_set[s] = false;
            }
        }
        set = keep;
        let mut added = 0;
        for &(side, _) in &sc.top {
            if !in_set[side] {
                in_set[side] = true;
                set.push(side);
                added += 1;
            }
        }
        set.sort_unstable();
        if added == 0 && !set.is_empty() && iters >= opts.max_iters {
            break;
        }
        if set.is_empty() {
            converged = true;
            break;
        }
        let residual_norm = {
            let r = &fit - &y;
            r.dot(&r).sqrt().to_f64_lossy()
        };
        let lip = engine.lipschitz(&set, opts.seed) * T::of(sl.curvature(residual_norm));
        let inner = Inner {
            engine: &engine,
            set: set.clone(),
            sl,
            lip: lip.max(T::tiny()),
        };
        let mut x: Vec<Array2<T>> = set.iter().map(|&s| u[s].clone()).collect();
        let budget = opts.max_iters.saturating_sub(iters).min(ROUND_ITERS * (outer + 1));
        if budget == 0 {
            break;
        }
        // Solve the restricted problem only as accurately as the global gap warrants.
        let inner_tol = (0.25 * tol_abs).max(0.3 * gap_now.unwrap_or(0.0));
        let res = run_inner(&inner, &mut x, opts, budget, inner_tol, iters, &mut trace, &mut lip_state)?;
        iters += res.iters;
        for (&s, xb) in set.iter().zip(x) {
            u[s] = xb;
        }
        if iters >= opts.max_iters || (res.stalled && added == 0) {
            break;
        }
    }

    let vars = ConvexVariables {
        keys: prog.blocks().to_vec(),
        z: u[..nb].to_vec(),
        zp: u[nb..].to_vec(),
    };
    trace.converged = converged;
    if trace.rows.is_empty() {
        let obj = prog.objective(&vars, T::zero())?.to_f64_lossy();
        trace.rows.push(TraceRow {
            iter: 0,
            objective: obj,
            group_norm: 0.0,
            constraint_total: 0.0,
            step: 0.0,
        });
    }
    Ok((vars, trace))
}

/// Subgradient of `h_C` at `u` for block `side`.
fn penalty_subgradient<T: Scalar>(engine: &Engine<'_, T>, side: usize, u: &Array2<T>) -> Array2<T> {
    let (rows, _) = engine.cone(side);
    let gu = rows.dot(&flat(u));
    let mut g = Array1::<T>::zeros(rows.ncols());
    for (r, &val) in gu.iter().enumerate() {
        if val < T::zero() {
            g -= &rows.row(r);
        }
    }
    unflat(g, engine.prog.d(), engine.prog.m1())
}

fn solve_penalty<T: Scalar>(prog: &ConvexProgram<T>, opts: &SolveOptions) -> Result<(ConvexVariables<T>, SolveTrace)> {
    let engine = Engine::new(prog);
    let nb = engine.nb;
    let set: Vec<usize> = (0..2 * nb).collect();
    let y = prog.y();
    let sl = SmoothLoss {
        loss: prog.loss(),
        delta: if prog.loss().is_smooth() { 0.0 } else { opts.smoothing.max(1e-3) },
    };
    let lip = (engine.lipschitz(&set, opts.seed) * T::of(sl.curvature(1.0))).max(T::tiny());
    let step = T::one() / lip;
    let mut x: Vec<Array2<T>> = vec![Array2::zeros((prog.d(), prog.m1())); 2 * nb];
    let mut trace = SolveTrace::default();
    let rounds = match opts.lambda_schedule {
        LambdaSchedule::Fixed => 1,
        LambdaSchedule::Geometric { rounds, .. } => rounds.max(1),
    };
    let mut lambda = opts.lambda;
    let per_round = (opts.max_iters / rounds).max(1);
    let mut iter = 0;
    let mut converged = false;
    let vars_of = |x: &[Array2<T>]| ConvexVariables {
        keys: prog.blocks().to_vec(),
        z: x[..nb].to_vec(),
        zp: x[nb..].to_vec(),
    };
    for round in 0..rounds {
        let lam = T::of(lambda);
        let penalized = |x: &[Array2<T>]| -> Result<(T, T)> {
            let vars = vars_of(x);
            let fit = prog.fit_value(&vars)?;
            let cons = prog.constraint_residuals(&vars)?.total;
            Ok((sl.value(fit.view(), y) + prog.regularizer(&vars) + lam * cons, cons))
        };
        let (mut f_x, _) = penalized(&x)?;
        let mut yv = x.clone();
        let mut t = T::one();
        let mut last_change = f64::INFINITY;
        for _ in 0..per_round {
            let fit_y = engine.fit(&set, &yv);
            let g = sl.gradient(fit_y.view(), y);
            let z: Vec<Array2<T>> = set
                .par_iter()
                .map(|&side| {
                    let mut grad = prog.apply_block_t(engine.key(side), g.view()) * engine.sigma(side);
                    grad.scaled_add(lam, &penalty_subgradient(&engine, side, &yv[side]));
                    group_soft_threshold(&(&yv[side] - &(grad * step)), step * engine.mu)
                })
                .collect();
            let (f_z, cons_z) = penalized(&z)?;
            if !f_z.is_finite() {
                return Err(Error::Divergence {
                    iter,
                    objective: f_z.to_f64_lossy(),
                });
            }
            let t_next = (T::one() + (T::one() + T::of(4.0) * t * t).sqrt()) / T::of(2.0);
            let improved = f_z <= f_x;
            let x_prev = x.clone();
            if improved {
                x = z.clone();
            }
            let (a, b) = (t / t_next, (t - T::one()) / t_next);
            yv = if improved {
                x.iter()
                    .zip(z.iter().zip(&x_prev))
                    .map(|(xn, (zb, xp))| xn + &((zb - xn) * a) + &((xn - xp) * b))
                    .collect()
            } else {
                x.clone()
            };
            t = if improved { t_next } else { T::one() };
            let f_new = if improved { f_z } else { f_x };
            last_change = (f_x - f_new).to_f64_lossy();
            f_x = f_new;
            let group: T = x.iter().map(frob).sum();
            trace.rows.push(TraceRow {
                iter,
                objective: f_x.to_f64_lossy(),
                group_norm: group.to_f64_lossy(),
                constraint_total: if improved { cons_z.to_f64_lossy() } else { f64::NAN },
                step: step.to_f64_lossy(),
            });
            iter += 1;
            if improved && last_change.abs() <= opts.tol_obj * f_x.to_f64_lossy().abs().max(1.0) {
                break;
            }
        }
        let cons = prog.constraint_residuals(&vars_of(&x))?.total.to_f64_lossy();
        trace.lambda_final = lambda;
        if cons <= opts.tol_constraint && last_change.abs() <= opts.tol_obj.max(1e-9) * f_x.to_f64_lossy().abs().max(1.0) {
            converged = true;
            break;
        }
        if let LambdaSchedule::Geometric { multiplier, .. } = opts.lambda_schedule {
            if round + 1 < rounds {
                lambda *= multiplier;
            }
        }
    }
    // fill missing constraint totals
    let mut last = 0.0;
    for r in &mut trace.rows {
        if r.constraint_total.is_nan() {
            r.constraint_total = last;
        }
        last = r.constraint_total;
    }
    trace.outer_rounds = trace.rows.len().min(1);
    trace.converged = converged;
    Ok((vars_of(&x), trace))
}
