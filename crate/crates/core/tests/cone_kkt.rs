use convexnet::cone::project;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn projection_satisfies_kkt_with_redundant_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for trial in 0..400 {
        let p = rng.gen_range(1..=10);
        let q = rng.gen_range(1..=180);
        let mut g = Array2::from_shape_fn((q, p), |_| rng.gen_range(-1.0..1.0));
        // duplicate and zero some rows, and make some sparse ones
        for r in 0..q {
            match rng.gen_range(0..6) {
                0 if r > 0 => {
                    let src = rng.gen_range(0..r);
                    let row = g.row(src).to_owned();
                    g.row_mut(r).assign(&row);
                }
                1 => g.row_mut(r).fill(0.0),
                2 => {
                    for c in 0..p {
                        if rng.gen_bool(0.5) {
                            g[[r, c]] = 0.0;
                        }
                    }
                }
                _ => {}
            }
        }
        let u = Array1::from_shape_fn(p, |_| rng.gen_range(-3.0..3.0));
        let x = project(g.view(), u.view());
        let gx = g.dot(&x);
        let infeas = gx.iter().fold(0.0f64, |a, &v| a.max(-v));
        // optimality: x is the projection iff <u - x, x> = 0 and <u - x, y> <= 0 for y in cone.
        let r = &u - &x;
        let orth = r.dot(&x).abs();
        // polar check: r must be in polar cone; test against the projection of r onto the cone
        let pr = project(g.view(), r.view());
        let polar = pr.dot(&pr).sqrt();
        worst = worst.max(infeas).max(orth).max(polar);
        assert!(infeas < 1e-9 && orth < 1e-9 && polar < 1e-7, "trial {trial}: p={p} q={q} infeas={infeas:e} orth={orth:e} polar={polar:e}");
    }
    eprintln!("worst kkt residual {worst:e}");
}
