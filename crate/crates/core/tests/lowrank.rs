mod common;

use convexnet::data::lowrank as lowrank_matrix;
use convexnet::loss::Loss;
use convexnet::lowrank::{bound_factor, choose_rank, singular_values, transfer_objective, truncate};
use convexnet::network::ParallelNet;
use convexnet::linalg::spectral_norm;
use nalgebra::DMatrix;
use ndarray::Array2;
use proptest::prelude::*;

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn spectrum_matches_nalgebra(seed in 0u64..100_000, n in 1usize..12, d in 1usize..12) {
        let mut r = common::rng(seed);
        let x = common::gaussian(&mut r, (n, d));
        let mut reference: Vec<f64> = to_na(&x).singular_values().iter().copied().collect();
        reference.sort_by(|a, b| b.total_cmp(a));
        let ours = singular_values(x.view());
        prop_assert_eq!(ours.len(), reference.len());
        for (a, b) in ours.iter().zip(&reference) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b));
        }
    }

    /// Eckart-Young: the spectral error of the rank-r truncation is sigma_{r+1}.
    #[test]
    fn truncation_error_is_next_singular_value(seed in 0u64..100_000, n in 2usize..10, d in 2usize..10) {
        let mut r = common::rng(seed);
        let x = common::gaussian(&mut r, (n, d));
        let k = n.min(d);
        for rank in 1..=k {
            let (xr, s) = truncate(x.view(), rank).unwrap();
            let next = s.get(rank).copied().unwrap_or(0.0);
            let err = spectral_norm((&x - &xr).view());
            prop_assert!((err - next).abs() <= 1e-9 * (1.0 + s[0]), "rank {} err {} sigma {}", rank, err, next);
            let rr: Vec<f64> = to_na(&xr).singular_values().iter().copied().collect();
            prop_assert_eq!(rr.iter().filter(|&&v| v > 1e-9 * (1.0 + s[0])).count(), rank.min(s.iter().filter(|&&v| v > 1e-9 * (1.0 + s[0])).count()));
        }
    }

    #[test]
    fn chosen_rank_is_minimal(seed in 0u64..100_000, eps in 0.01f64..10.0, beta in 0.01f64..1.0) {
        let mut r = common::rng(seed);
        let x = common::gaussian(&mut r, (8, 6));
        let s = singular_values(x.view());
        let rank = choose_rank(&s, eps, beta, 2, 1, 1.0);
        let factor = |k: usize| bound_factor(beta, 2, 1, 1.0, s.get(k).copied().unwrap_or(0.0));
        prop_assert!(factor(rank) <= 1.0 + eps);
        for smaller in 1..rank {
            prop_assert!(factor(smaller) > 1.0 + eps);
        }
    }
}

#[test]
fn generated_matrix_has_flat_tail() {
    let x = lowrank_matrix(15, 10, 5, 3).unwrap();
    let s = singular_values(x.view());
    for v in &s[5..] {
        assert!((v - 1.0).abs() < 1e-10, "{s:?}");
    }
    assert!(lowrank_matrix(15, 10, 11, 0).is_err());
}

#[test]
fn zero_network_transfers_to_plain_loss() {
    let mut r = common::rng(4);
    let x = common::gaussian(&mut r, (6, 3));
    let y = common::gaussian(&mut r, (6, 1)).column(0).to_owned();
    let zero = ParallelNet::<f64>::empty(vec![3, 2, 1]);
    let p = transfer_objective(&zero, x.view(), y.view(), 0.3, Loss::L2Norm).unwrap();
    assert!((p - y.dot(&y).sqrt()).abs() < 1e-15);
    let p = transfer_objective(&ParallelNet::zeros(&[3, 2, 1], 2), x.view(), y.view(), 0.3, Loss::Squared).unwrap();
    assert!((p - 0.5 * y.dot(&y)).abs() < 1e-15);
}
