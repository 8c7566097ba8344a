#![allow(dead_code)]

use convexnet::arrangements::{
    all_sign_patterns, enumerate_first_layer, enumerate_second_layer, ActivationPattern, ArrangementSet,
    FirstLayerGrid, Mode, Source,
};
use convexnet::convex_program::{ConvexProgram, ConvexVariables, ProgramOptions, ProgramSpec};
use convexnet::loss::Loss;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    use rand_distr::{Distribution, StandardNormal};
    Array2::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

/// Solves a small dense `Ax = b` by Gaussian elimination with partial pivoting.
pub fn dense_solve(mut a: Array2<f64>, mut b: Array1<f64>) -> Array1<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[[i, c]].abs().total_cmp(&a[[j, c]].abs())).unwrap();
        for k in 0..n {
            a.swap([c, k], [p, k]);
        }
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[[r, c]] / a[[c, c]];
            for k in c..n {
                a[[r, k]] -= f * a[[c, k]];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = Array1::zeros(n);
    for r in (0..n).rev() {
        let mut s = b[r];
        for k in r + 1..n {
            s -= a[[r, k]] * x[k];
        }
        x[r] = s / a[[r, r]];
    }
    x
}

/// Dense ADMM for `min 1/2|A u - y|^2 + mu sum_B |u_B| s.t. G u >= 0`
/// with `u = [z; z']`, splitting `u = w` (group norm) and `G u = s >= 0`.
/// Returns the objective at the final iterate together with its violation.
pub fn admm_oracle(prog: &ConvexProgram<f64>, iters: usize) -> (f64, f64) {
    let nb = prog.num_blocks();
    let p = prog.block_dim();
    let a1 = prog.densify();
    let n = prog.n();
    let dim = 2 * nb * p;
    let mut a = Array2::<f64>::zeros((n, dim));
    for r in 0..n {
        for c in 0..nb * p {
            a[[r, c]] = a1[[r, c]];
            a[[r, nb * p + c]] = -a1[[r, c]];
        }
    }
    let mut grows: Vec<Array1<f64>> = Vec::new();
    for side in 0..2 * nb {
        let g = prog.cone_rows(prog.blocks()[side % nb]);
        for row in g.rows() {
            let mut full = Array1::zeros(dim);
            for c in 0..p {
                full[side * p + c] = row[c];
            }
            grows.push(full);
        }
    }
    let mut g = Array2::<f64>::zeros((grows.len(), dim));
    for (i, r) in grows.iter().enumerate() {
        g.row_mut(i).assign(r);
    }
    let y = prog.y().to_owned();
    let mu = prog.mu();
    let rho = 1.0;
    let lhs = a.t().dot(&a) + Array2::<f64>::eye(dim) * rho + g.t().dot(&g) * rho;
    let mut u = Array1::<f64>::zeros(dim);
    let mut w = u.clone();
    let mut s = Array1::<f64>::zeros(g.nrows());
    let mut al = u.clone();
    let mut be = s.clone();
    let aty = a.t().dot(&y);
    // factor once via repeated solves (dimension is tiny)
    let inv = {
        let mut inv = Array2::<f64>::zeros((dim, dim));
        for c in 0..dim {
            let mut e = Array1::zeros(dim);
            e[c] = 1.0;
            inv.column_mut(c).assign(&dense_solve(lhs.clone(), e));
        }
        inv
    };
    for _ in 0..iters {
        let rhs = &aty + &((&w - &al) * rho) + &(g.t().dot(&(&s - &be)) * rho);
        u = inv.dot(&rhs);
        for b in 0..2 * nb {
            let v: Array1<f64> = (0..p).map(|c| u[b * p + c] + al[b * p + c]).collect();
            let nv = v.dot(&v).sqrt();
            let f = if nv > mu / rho { 1.0 - mu / rho / nv } else { 0.0 };
            for c in 0..p {
                w[b * p + c] = f * v[c];
            }
        }
        let gu = g.dot(&u);
        s = (&gu + &be).mapv(|v| v.max(0.0));
        al = &al + &(&u - &w);
        be = &be + &(&gu - &s);
    }
    let obj = |x: &Array1<f64>| {
        let r = a.dot(x) - &y;
        let reg: f64 = (0..2 * nb)
            .map(|b| (0..p).map(|c| x[b * p + c].powi(2)).sum::<f64>().sqrt())
            .sum();
        0.5 * r.dot(&r) + mu * reg
    };
    let viol = g.dot(&u).iter().map(|&v| (-v).max(0.0)).sum::<f64>();
    (obj(&u), viol)
}

/// Random small program with exact arrangements, `m1 = 1`, both signs.
/// The second-layer set is subsampled so the variable count stays small.
pub fn small_program(seed: u64, max_vars: usize) -> Option<ConvexProgram<f64>> {
    let mut r = rng(seed);
    let n = r.gen_range(2..=4);
    let d = r.gen_range(1..=2);
    let x = gaussian(&mut r, (n, d));
    let y = gaussian(&mut r, (n, 1)).column(0).to_owned();
    let first = enumerate_first_layer(x.view(), Mode::exact()).ok()?;
    let grid = FirstLayerGrid::ordered(&first, 1);
    let second = enumerate_second_layer(x.view(), &first, 1, Mode::exact()).ok()?;
    let per_l = 2 * d * 2 * grid.len();
    let keep = (max_vars / per_l).max(1).min(second.len());
    let mut idx: Vec<usize> = (0..second.len()).collect();
    for i in 0..idx.len() {
        let j = r.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    let pats: Vec<ActivationPattern> = idx[..keep].iter().map(|&i| second.patterns[i].clone()).collect();
    let second = ArrangementSet::from_patterns(n, pats, Source::Exact).ok()?;
    let beta = r.gen_range(0.01..0.5);
    let prog = ConvexProgram::build(
        x,
        y,
        grid,
        second,
        all_sign_patterns(1),
        ProgramSpec { m2: 1, beta, loss: Loss::Squared },
        ProgramOptions::default(),
    )
    .ok()?;
    (prog.num_variables() <= max_vars).then_some(prog)
}

/// Random feasible variables: each block is a nonnegative combination of
/// points of its cone obtained by projecting Gaussian vectors.
pub fn random_feasible(prog: &ConvexProgram<f64>, rng: &mut ChaCha8Rng, density: f64) -> ConvexVariables<f64> {
    let mut v = prog.zeros();
    let (d, m1) = (prog.d(), prog.m1());
    for side in 0..2 {
        for k in 0..prog.num_blocks() {
            if !rng.gen_bool(density) {
                continue;
            }
            let g = prog.cone_rows(prog.blocks()[k]);
            let w = gaussian(rng, (d * m1, 1)).column(0).to_owned();
            let p = convexnet::cone::project(g.view(), w.view());
            let block = Array2::from_shape_fn((d, m1), |(c, j)| p[j * d + c]);
            if side == 0 {
                v.z[k] = block;
            } else {
                v.zp[k] = block;
            }
        }
    }
    v
}

/// Largest `t` with `s_i x_i . w >= t` for all rows, `w` in the unit box.
pub fn margin(x: &Array2<f64>, signs: &[f64]) -> f64 {
    let d = x.ncols();
    let mut p = microlp::Problem::new(microlp::OptimizationDirection::Maximize);
    let w: Vec<_> = (0..d).map(|_| p.add_var(0.0, (-1.0, 1.0))).collect();
    let t = p.add_var(1.0, (-10.0, 10.0));
    for (i, row) in x.outer_iter().enumerate() {
        let mut terms: Vec<_> = (0..d).map(|c| (w[c], signs[i] * row[c])).collect();
        terms.push((t, -1.0));
        p.add_constraint(terms.as_slice(), microlp::ComparisonOp::Ge, 0.0);
    }
    p.solve()
        .ok()
        .and_then(|o| o.into_solution().ok())
        .map_or(f64::NEG_INFINITY, |s| s.objective())
}

/// Every sign vector over the rows, kept when some direction realizes it
/// strictly; the zero pattern is always included.
pub fn brute_force_patterns(x: &Array2<f64>) -> Vec<ActivationPattern> {
    let n = x.nrows();
    let mut out = vec![ActivationPattern::zeros(n)];
    for mask in 0u32..(1 << n) {
        let bits: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
        let signs: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
        if margin(x, &signs) > 1e-9 {
            out.push(ActivationPattern::from_bits(&bits));
        }
    }
    out.sort();
    out.dedup();
    out
}

/// Exhaustive search over sign patterns for programs with scalar blocks
/// (`d = m1 = 1`): each variable is zero, positive or negative, and on a
/// fixed support with fixed signs the problem is an unconstrained least
/// squares with a linear term.
pub fn active_set_oracle(prog: &ConvexProgram<f64>) -> f64 {
    let nb = prog.num_blocks();
    let a1 = prog.densify();
    let nv = 2 * nb;
    let col = |v: usize| -> ndarray::Array1<f64> {
        let c = a1.column(v % nb).to_owned();
        if v < nb { c } else { -c }
    };
    let cones: Vec<_> = (0..nv).map(|v| prog.cone_rows(prog.blocks()[v % nb])).collect();
    let allowed = |v: usize, s: f64| cones[v].iter().all(|&g| g * s >= 0.0);
    let y = prog.y().to_owned();
    let mu = prog.mu();
    let objective = |u: &[f64]| {
        let mut f = ndarray::Array1::<f64>::zeros(prog.n());
        for (v, &c) in u.iter().enumerate() {
            f = f + col(v) * c;
        }
        let r = &f - &y;
        0.5 * r.dot(&r) + mu * u.iter().map(|c| c.abs()).sum::<f64>()
    };
    let mut best = 0.5 * y.dot(&y);
    for code in 0..3usize.pow(nv as u32) {
        let mut signs = vec![0.0; nv];
        let mut c = code;
        for s in signs.iter_mut() {
            *s = [0.0, 1.0, -1.0][c % 3];
            c /= 3;
        }
        let support: Vec<usize> = (0..nv).filter(|&v| signs[v] != 0.0).collect();
        if support.is_empty() || support.len() > prog.n() || support.iter().any(|&v| !allowed(v, signs[v])) {
            continue;
        }
        let k = support.len();
        let cols: Vec<_> = support.iter().map(|&v| col(v)).collect();
        let gram = ndarray::Array2::from_shape_fn((k, k), |(a, b)| cols[a].dot(&cols[b]));
        let rhs = ndarray::Array1::from_shape_fn(k, |a| cols[a].dot(&y) - mu * signs[support[a]]);
        let sol = dense_solve(gram, rhs);
        if sol.iter().any(|v| !v.is_finite()) || sol.iter().zip(&support).any(|(c, &v)| c * signs[v] <= 0.0) {
            continue;
        }
        let mut u = vec![0.0; nv];
        for (a, &v) in support.iter().enumerate() {
            u[v] = sol[a];
        }
        best = best.min(objective(&u));
    }
    best
}
