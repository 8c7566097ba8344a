mod common;

use convexnet::arrangements::{all_sign_patterns, enumerate_first_layer, enumerate_second_layer, FirstLayerGrid, Mode};
use convexnet::convex_program::{ConvexProgram, ConvexVariables, ProgramOptions, ProgramSpec};
use convexnet::error::Error;
use convexnet::loss::Loss;
use convexnet::solver::{solve, SolveOptions};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;

fn two_neuron_program(seed: u64, opts: ProgramOptions) -> ConvexProgram<f64> {
    let mut r = common::rng(seed);
    let n = 3;
    let d = r.gen_range(1..=2);
    let x = common::gaussian(&mut r, (n, d));
    let y = common::gaussian(&mut r, (n, 1)).column(0).to_owned();
    let first = enumerate_first_layer(x.view(), Mode::exact()).unwrap();
    let second = enumerate_second_layer(x.view(), &first, 2, Mode::exact()).unwrap();
    ConvexProgram::build(
        x,
        y,
        FirstLayerGrid::ordered(&first, 2),
        second,
        all_sign_patterns(2),
        ProgramSpec { m2: 2, beta: 0.1, loss: Loss::Squared },
        opts,
    )
    .unwrap()
}

fn random_vars(prog: &ConvexProgram<f64>, seed: u64) -> ConvexVariables<f64> {
    let mut r = common::rng(seed);
    let mut v = prog.zeros();
    for b in v.z.iter_mut().chain(v.zp.iter_mut()) {
        *b = common::gaussian(&mut r, b.dim());
    }
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn fit_value_is_dense_product(seed in 0u64..10_000) {
        let Some(prog) = common::small_program(seed, 200) else { return Ok(()) };
        let v = random_vars(&prog, seed);
        let flat = v.to_flat();
        let half = flat.len() / 2;
        let diff: Array1<f64> = (0..half).map(|k| flat[k] - flat[half + k]).collect();
        let dense = prog.densify().dot(&diff);
        let fit = prog.fit_value(&v).unwrap();
        for (a, b) in dense.iter().zip(fit.iter()) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn objective_is_midpoint_convex(seed in 0u64..10_000) {
        let Some(prog) = common::small_program(seed, 200) else { return Ok(()) };
        let mut r = common::rng(seed + 1);
        let a = common::random_feasible(&prog, &mut r, 0.5);
        let b = common::random_feasible(&prog, &mut r, 0.5);
        let mut mid = a.clone();
        for k in 0..mid.z.len() {
            mid.z[k] = (&a.z[k] + &b.z[k]) * 0.5;
            mid.zp[k] = (&a.zp[k] + &b.zp[k]) * 0.5;
        }
        let fa = prog.objective(&a, 0.0).unwrap();
        let fb = prog.objective(&b, 0.0).unwrap();
        let fm = prog.objective(&mid, 0.0).unwrap();
        prop_assert!(fm <= 0.5 * (fa + fb) + 1e-10);
        prop_assert!(prog.constraint_residuals(&mid).unwrap().total <= 1e-9);
    }

    #[test]
    fn flat_roundtrip(seed in 0u64..10_000) {
        let Some(prog) = common::small_program(seed, 200) else { return Ok(()) };
        let v = random_vars(&prog, seed);
        let back = ConvexVariables::<f64>::from_flat(prog.blocks().to_vec(), prog.d(), prog.m1(), &v.to_flat()).unwrap();
        prop_assert_eq!(back, v);
    }

    /// The reduced cone rows describe the same cone as the full constraint list.
    #[test]
    fn cone_rows_match_constraints(seed in 0u64..10_000) {
        let prog = two_neuron_program(seed % 200, ProgramOptions::default());
        let mut r = common::rng(seed);
        for &b in prog.blocks().iter().take(20) {
            let g = prog.cone_rows(b);
            for _ in 0..20 {
                let u: Array2<f64> = common::gaussian(&mut r, (prog.d(), prog.m1()));
                let flat: Array1<f64> = u.t().iter().copied().collect();
                let gu = g.dot(&flat);
                let margin = gu.iter().copied().fold(f64::INFINITY, f64::min);
                if margin.abs() < 1e-8 {
                    continue;
                }
                let viol = prog.block_violation(b, &u);
                prop_assert_eq!(margin > 0.0, viol == 0.0, "margin {} violation {}", margin, viol);
            }
        }
    }
}

#[test]
fn reductions_preserve_the_optimum() {
    let opts = SolveOptions { tol_gap: 1e-9, ..SolveOptions::default() };
    for seed in 0..6 {
        let full = two_neuron_program(seed, ProgramOptions::default());
        let reduced = two_neuron_program(
            seed,
            ProgramOptions { reduce_symmetry: true, prune_empty: true, ..ProgramOptions::default() },
        );
        assert!(reduced.num_blocks() < full.num_blocks());
        let (vf, _) = solve(&full, &opts).unwrap();
        let (vr, _) = solve(&reduced, &opts).unwrap();
        let of = full.objective(&vf, 0.0).unwrap();
        let or = reduced.objective(&vr, 0.0).unwrap();
        assert!((of - or).abs() <= 1e-6 * (1.0 + of), "seed {seed}: full {of} reduced {or}");
    }
}

#[test]
fn mismatched_inputs_rejected() {
    let prog = two_neuron_program(0, ProgramOptions::default());
    let mut v = prog.zeros();
    v.z.pop();
    assert!(matches!(prog.fit_value(&v), Err(Error::KeyMismatch(_))));
    assert!(prog.with_targets(Array1::zeros(prog.n() + 1)).is_err());
    assert!(ConvexVariables::<f64>::from_flat(prog.blocks().to_vec(), prog.d(), prog.m1(), &[0.0; 3]).is_err());
    let tight = ProgramOptions { max_scalars: 1, ..ProgramOptions::default() };
    let x = prog.x().to_owned();
    let r = ConvexProgram::build(
        x,
        prog.y().to_owned(),
        prog.grid().clone(),
        prog.second().clone(),
        all_sign_patterns(2),
        prog.spec(),
        tight,
    );
    assert!(matches!(r, Err(Error::BudgetExceeded { .. })));
}

#[test]
fn zero_point_objective_is_loss_of_zero() {
    let prog = two_neuron_program(1, ProgramOptions::default());
    let obj = prog.objective(&prog.zeros(), 1.0).unwrap();
    let y = prog.y();
    assert!((obj - 0.5 * y.dot(&y)).abs() < 1e-15);
    assert!((prog.mu() - 0.1 / 2f64.sqrt()).abs() < 1e-15);
}
