use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfeuot::data::gaussian_pair;
use sfeuot::eval::{
    coupling_energy_distance, energy_distance, energy_null_quantile, mode_coverage, mode_frequencies,
    relative_moment_errors, transport_cost,
};
use sfeuot::oracles::{gaussian_eot_coupling, GaussianCoupling};
use sfeuot::Matrix;

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-12)
}

fn one_d_joint(shift: f64) -> GaussianCoupling {
    gaussian_eot_coupling(
        &DVector::from_element(1, 0.0),
        &DMatrix::from_element(1, 1, 1.0),
        &DVector::from_element(1, shift),
        &DMatrix::from_element(1, 1, 1.0),
        1.0,
    )
    .unwrap()
}

#[test]
fn self_consistent_draws_have_small_moment_errors() {
    for dim in [1, 3, 8] {
        let pair = gaussian_pair(dim, 11, 1.0).unwrap();
        let (x, y) = pair.truth.sample(100_000, &mut ChaCha8Rng::seed_from_u64(dim as u64));
        let e = relative_moment_errors(&x, &y, &pair.truth).unwrap();
        assert!(e.dm_rel.unwrap() <= 2.0, "dim {dim}: {e:?}");
        assert!(e.dvar_rel <= 2.0, "dim {dim}: {e:?}");
        assert!(e.dcov_rel <= 2.0, "dim {dim}: {e:?}");
    }
}

#[test]
fn identity_map_matches_monge_truth() {
    let d = 3;
    let eye = DMatrix::identity(d, d);
    let zero = DVector::zeros(d);
    let truth = gaussian_eot_coupling(&zero, &eye, &zero, &eye, 0.0).unwrap();
    assert!((truth.cross_cov() - &eye).norm() < 1e-12);
    let (x, _) = truth.sample(20_000, &mut ChaCha8Rng::seed_from_u64(5));
    let e = relative_moment_errors(&x, &x, &truth).unwrap();
    assert_eq!(e.dm_rel, None);
    // Ĉ is the sample covariance of x itself, so the error is pure sampling noise.
    assert!(e.dcov_rel <= 3.0, "{e:?}");
    assert_eq!(transport_cost(&x, &x).unwrap(), 0.0);
}

#[test]
fn transport_cost_matches_gaussian_identity() {
    let pair = gaussian_pair(4, 3, 1.0).unwrap();
    let (x, y) = pair.truth.sample(100_000, &mut ChaCha8Rng::seed_from_u64(8));
    let est = transport_cost(&x, &y).unwrap();
    let exact = pair.truth.transport_cost();
    assert!((est - exact).abs() <= 0.02 * exact, "{est} vs {exact}");
    let single = transport_cost(&Matrix::from_rows(&[vec![0.0]]), &Matrix::from_rows(&[vec![2.0]])).unwrap();
    assert_eq!(single, 2.0);
}

#[test]
fn mode_coverage_counts_hit_modes() {
    let modes = sfeuot::data::eight_gaussian_means();
    let all = Matrix::from_rows(&modes);
    assert_eq!(mode_coverage(&all, &modes, 1.5).unwrap(), 1.0);
    let half = Matrix::from_rows(&modes[..4]);
    assert_eq!(mode_coverage(&half, &modes, 0.1).unwrap(), 0.5);
    assert!(mode_coverage(&all, &[], 1.0).is_err());
    let f = mode_frequencies(&half, &modes);
    assert_eq!(f.iter().sum::<f64>(), 1.0);
    assert_eq!(f[4..].iter().sum::<f64>(), 0.0);
}

#[test]
fn energy_distance_of_matching_joints_is_small() {
    let truth = one_d_joint(0.0);
    let (x0, y0) = truth.sample(10_000, &mut ChaCha8Rng::seed_from_u64(1));
    let (x1, y1) = truth.sample(10_000, &mut ChaCha8Rng::seed_from_u64(2));
    assert_eq!(coupling_energy_distance(&x0, &y0, &x0, &y0).unwrap(), 0.0);
    let e = coupling_energy_distance(&x0, &y0, &x1, &y1).unwrap();
    assert!(e <= 0.02, "{e}");
}

#[test]
fn mean_shift_beats_the_permutation_null() {
    let (x0, y0) = one_d_joint(0.0).sample(1500, &mut ChaCha8Rng::seed_from_u64(3));
    let (x1, y1) = one_d_joint(1.0).sample(1500, &mut ChaCha8Rng::seed_from_u64(4));
    let (a, b) = (x0.hconcat(&y0), x1.hconcat(&y1));
    let e = energy_distance(&a, &b).unwrap();
    let null = energy_null_quantile(&a, &b, 100, 0.99, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert!(e > null, "{e} vs null {null}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metrics_ignore_sample_order(seed in any::<u64>(), dim in 1usize..5) {
        let pair = gaussian_pair(dim, seed % 17, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = pair.truth.sample(1200, &mut rng);
        let idx = shuffled(x.rows(), seed ^ 0x5eed);
        let (px, py) = (x.select_rows(&idx), y.select_rows(&idx));

        let e = relative_moment_errors(&x, &y, &pair.truth).unwrap();
        let pe = relative_moment_errors(&px, &py, &pair.truth).unwrap();
        prop_assert!(close(e.dm_rel.unwrap(), pe.dm_rel.unwrap()));
        prop_assert!(close(e.dvar_rel, pe.dvar_rel));
        prop_assert!(close(e.dcov_rel, pe.dcov_rel));
        prop_assert!(close(transport_cost(&x, &y).unwrap(), transport_cost(&px, &py).unwrap()));

        let (sx, sy) = (x.select_rows(&idx[..200]), y.select_rows(&idx[..200]));
        let head: Vec<usize> = (0..200).collect();
        let (hx, hy) = (x.select_rows(&head), y.select_rows(&head));
        let e1 = coupling_energy_distance(&sx, &sy, &hx, &hy).unwrap();
        let back = shuffled(200, seed);
        let e2 = coupling_energy_distance(&sx.select_rows(&back), &sy.select_rows(&back), &hx, &hy).unwrap();
        prop_assert!(close(e1, e2));
    }

    #[test]
    fn doubling_everything_keeps_relative_errors(seed in any::<u64>(), dim in 1usize..5) {
        let pair = gaussian_pair(dim, seed % 13, 1.0).unwrap();
        let (x, y) = pair.truth.sample(1000, &mut ChaCha8Rng::seed_from_u64(seed));
        let twice = GaussianCoupling { mean: &pair.truth.mean * 2.0, cov: &pair.truth.cov * 4.0 };
        let e = relative_moment_errors(&x, &y, &pair.truth).unwrap();
        let e2 = relative_moment_errors(&x.scale(2.0), &y.scale(2.0), &twice).unwrap();
        prop_assert!(close(e.dm_rel.unwrap(), e2.dm_rel.unwrap()));
        prop_assert!(close(e.dvar_rel, e2.dvar_rel));
        prop_assert!(close(e.dcov_rel, e2.dcov_rel));
    }

    #[test]
    fn energy_distance_is_nonnegative_and_symmetric(seed in any::<u64>(), n in 2usize..40, m in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = one_d_joint(0.0).sample(n, &mut rng).0;
        let b = one_d_joint(0.5).sample(m, &mut rng).1;
        let ab = energy_distance(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!(close(ab, energy_distance(&b, &a).unwrap()));
    }
}
