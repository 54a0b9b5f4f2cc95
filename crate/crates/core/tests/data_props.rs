use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfeuot::data::{gaussian_pair, pair_target_params, sample, DatasetSpec, TOY_BOUND};

fn spec() -> impl Strategy<Value = DatasetSpec> {
    prop_oneof![
        (1usize..6).prop_map(|dim| DatasetSpec::StdGaussian { dim }),
        Just(DatasetSpec::EightGaussian {
            component_std: 0.04,
            mode_weights: None
        }),
        Just(DatasetSpec::Moon),
        Just(DatasetSpec::Spiral),
        (1usize..5, any::<u64>()).prop_map(|(dim, pair_seed)| DatasetSpec::GaussianPair { dim, pair_seed }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sampling_is_a_pure_function_of_seed(s in spec(), n in 1usize..200, seed in any::<u64>()) {
        let a = sample(&s, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = sample(&s, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a.shape(), (n, s.dim()));
        let bits = |m: &sfeuot::Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn toy_sets_stay_in_box(seed in any::<u64>()) {
        for s in [DatasetSpec::Moon, DatasetSpec::Spiral] {
            let m = sample(&s, 2000, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!(m.as_slice().iter().all(|v| v.abs() <= TOY_BOUND));
        }
    }

    #[test]
    fn pair_target_is_well_conditioned(dim in 1usize..12, seed in any::<u64>()) {
        let (m1, s1) = pair_target_params(dim, seed).unwrap();
        prop_assert!(m1.iter().all(|v| (-1.0..=1.0).contains(v)));
        let eig = s1.clone().symmetric_eigenvalues();
        prop_assert!(eig.min() >= 0.5 - 1e-9);
        let again = pair_target_params(dim, seed).unwrap();
        prop_assert_eq!(&again.0, &m1);
        prop_assert_eq!(&again.1, &s1);
    }

    #[test]
    fn pair_truth_is_psd(dim in 1usize..8, seed in any::<u64>(), sigma2 in 0.0f64..4.0) {
        let pair = gaussian_pair(dim, seed, sigma2).unwrap();
        prop_assert!(pair.truth.min_eigenvalue() >= -1e-9);
    }
}
