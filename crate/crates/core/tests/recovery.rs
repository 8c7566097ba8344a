mod common;

use convexnet::arrangements::{all_sign_patterns, enumerate_first_layer, enumerate_second_layer, FirstLayerGrid, Mode};
use convexnet::convex_program::{ConvexProgram, ProgramOptions, ProgramSpec};
use convexnet::error::Error;
use convexnet::loss::Loss;
use convexnet::recovery::{decode_index, encode_index, recover_network, verify_equivalence, RecoverOptions};
use convexnet::solver::{solve, SolveOptions};
use proptest::prelude::*;
use rand::Rng;

fn toy_program(seed: u64) -> ConvexProgram<f64> {
    let mut r = common::rng(seed);
    let n = r.gen_range(2..=4);
    let d = r.gen_range(1..=2);
    let m1 = r.gen_range(1..=2);
    let m2 = r.gen_range(1..=3);
    let x = common::gaussian(&mut r, (n, d));
    let y = common::gaussian(&mut r, (n, 1)).column(0).to_owned();
    let first = enumerate_first_layer(x.view(), Mode::exact()).unwrap();
    let second = enumerate_second_layer(x.view(), &first, m1, Mode::exact()).unwrap();
    ConvexProgram::build(
        x,
        y,
        FirstLayerGrid::ordered(&first, m1),
        second,
        all_sign_patterns(m1),
        ProgramSpec { m2, beta: r.gen_range(0.01..0.3), loss: Loss::Squared },
        ProgramOptions::default(),
    )
    .unwrap()
}

/// `(1/m2)^{1/2} (sum |z_b| + sum |z'_b|)` computed directly from the blocks.
fn expected_reg(prog: &ConvexProgram<f64>, vars: &convexnet::convex_program::ConvexVariables<f64>) -> f64 {
    let f = |b: &ndarray::Array2<f64>| b.iter().map(|v| v * v).sum::<f64>().sqrt();
    vars.z.iter().chain(&vars.zp).map(f).sum::<f64>() / (prog.m2() as f64).sqrt()
}

#[test]
fn solved_programs_recover_exactly() {
    let opts = SolveOptions { max_iters: 50_000, ..SolveOptions::default() };
    for seed in 0..20 {
        let prog = toy_program(seed);
        let (vars, _) = solve(&prog, &opts).unwrap();
        for prune_zero in [false, true] {
            let net = recover_network(&prog, &vars, &RecoverOptions { prune_zero, ..Default::default() }).unwrap();
            let fit = prog.fit_value(&vars).unwrap();
            let out = net.forward(prog.x()).unwrap();
            for (a, b) in out.iter().zip(fit.iter()) {
                assert!((a - b).abs() <= 1e-8, "seed {seed}: output {a} vs fit {b}");
            }
            let reg = expected_reg(&prog, &vars);
            assert!((net.path_regularizer() - reg).abs() <= 1e-8, "seed {seed}");
            let report = verify_equivalence(&prog, &vars, &net).unwrap();
            assert!(report.max_output_diff <= 1e-8 && report.reg_cost_diff <= 1e-8);
            assert_eq!(report.k_total, 2 * prog.num_blocks());
            if !prune_zero {
                assert_eq!(net.num_subnets(), 2 * prog.num_blocks());
                let (m, p1, p2) = prog.grid_dims();
                let prov = net.provenance.as_ref().unwrap();
                for (k, &(s, l, i)) in prov.iter().enumerate() {
                    if prog.num_blocks() == m * p1 * p2 {
                        assert_eq!(decode_index(k + 1, m, p1, p2).unwrap(), (s, l, i));
                    }
                }
            }
        }
    }
}

#[test]
fn random_feasible_points_recover() {
    for seed in 0..20 {
        let prog = toy_program(seed + 100);
        let mut r = common::rng(seed);
        let vars = common::random_feasible(&prog, &mut r, 0.4);
        let net = recover_network(&prog, &vars, &RecoverOptions::default()).unwrap();
        let report = verify_equivalence(&prog, &vars, &net).unwrap();
        assert!(report.max_output_diff <= 1e-8, "seed {seed}: {report:?}");
        assert!((net.path_regularizer() - expected_reg(&prog, &vars)).abs() <= 1e-8);
    }
}

#[test]
fn infeasible_variables_rejected() {
    let prog = toy_program(3);
    let mut vars = prog.zeros();
    let mut r = common::rng(0);
    for b in vars.z.iter_mut() {
        *b = common::gaussian(&mut r, b.dim()) * 10.0;
    }
    assert!(prog.constraint_residuals(&vars).unwrap().total > 1e-6);
    let err = recover_network(&prog, &vars, &RecoverOptions::default()).unwrap_err();
    assert!(matches!(err, Error::InfeasibleVars { .. }));
}

#[test]
fn all_zero_variables_give_zero_net() {
    let prog = toy_program(5);
    let vars = prog.zeros();
    let net = recover_network(&prog, &vars, &RecoverOptions { prune_zero: true, ..Default::default() }).unwrap();
    assert_eq!(net.num_subnets(), 0);
    let report = verify_equivalence(&prog, &vars, &net).unwrap();
    assert_eq!(report.max_output_diff, 0.0);
    assert_eq!(report.emitted, 0);
}

proptest! {
    #[test]
    fn index_roundtrip(m in 1usize..6, p1 in 1usize..8, p2 in 1usize..8, frac in 0.0f64..1.0) {
        let total = 2 * m * p1 * p2;
        let k = 1 + ((total as f64 - 1.0) * frac) as usize;
        let (s, l, i) = decode_index(k, m, p1, p2).unwrap();
        prop_assert!(s >= 1 && s <= m && l >= 1 && l <= p2 && i >= 1 && i <= p1);
        prop_assert_eq!(encode_index(s, l, i, m, p1, p2, k > m * p1 * p2).unwrap(), k);
        prop_assert!(decode_index(total + 1, m, p1, p2).is_err());
    }
}
