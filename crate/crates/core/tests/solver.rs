mod common;

use convexnet::solver::{duality_gap, solve, SolveOptions};

#[test]
fn matches_admm_oracle_on_small_programs() {
    let mut checked = 0;
    for seed in 0..200u64 {
        let Some(prog) = common::small_program(seed, 30) else { continue };
        let opts = SolveOptions::default();
        let (vars, trace) = solve(&prog, &opts).unwrap();
        let obj = prog.objective(&vars, 0.0).unwrap();
        let (oracle, viol) = common::admm_oracle(&prog, 20000);
        assert!(viol < 1e-6, "oracle violation {viol}");
        assert!((obj - oracle).abs() <= 1e-6, "seed {seed}: solver {obj} oracle {oracle} trace {:?}", trace.rel_gap);
        assert!(trace.constraint_total <= 1e-9);
        let cert = duality_gap(&prog, &vars).unwrap();
        assert!(cert.lower_bound <= obj + 1e-12 && cert.rel_gap <= 1e-6, "seed {seed}: {cert:?} obj {obj} trace gap {:?} conv {} rows {}", trace.rel_gap, trace.converged, trace.rows.len());
        checked += 1;
        if checked == 20 {
            break;
        }
    }
    assert!(checked >= 10, "only {checked} programs generated");
}

#[test]
fn matches_active_set_oracle_on_scalar_programs() {
    let mut checked = 0;
    for seed in 0..2000u64 {
        let Some(prog) = common::small_program(seed, 10) else { continue };
        if prog.d() != 1 {
            continue;
        }
        let (vars, trace) = solve(&prog, &SolveOptions::default()).unwrap();
        let obj = prog.objective(&vars, 0.0).unwrap();
        let oracle = common::active_set_oracle(&prog);
        assert!(trace.constraint_total <= 1e-6);
        assert!((obj - oracle).abs() <= 1e-6 * (1.0 + oracle), "seed {seed}: solver {obj} oracle {oracle}");
        checked += 1;
        if checked == 10 {
            break;
        }
    }
    assert_eq!(checked, 10);
}
