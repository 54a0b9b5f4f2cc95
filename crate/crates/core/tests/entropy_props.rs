use proptest::prelude::*;
use sfeuot::entropy::{conjugate_eval, conjugate_grad, EntropySpec};

fn spec() -> impl Strategy<Value = EntropySpec> {
    prop_oneof![
        Just(EntropySpec::Indicator),
        (0.2f64..20.0).prop_map(|scale| EntropySpec::ScaledKl { scale }),
        Just(EntropySpec::SoftplusConjugate),
    ]
}

proptest! {
    #[test]
    fn fenchel_lower_bound(s in spec(), x in -20.0f64..20.0) {
        prop_assert!(conjugate_eval(&s, x).unwrap() >= x - 1e-12);
    }

    #[test]
    fn nondecreasing_and_convex(s in spec(), x in -20.0f64..20.0, h in 1e-3f64..1.0) {
        let f = |x: f64| conjugate_eval(&s, x).unwrap();
        let scale = 1.0 + f(x + h).abs();
        prop_assert!(f(x + h) - f(x) >= -1e-9 * scale);
        prop_assert!(f(x + h) - 2.0 * f(x) + f(x - h) >= -1e-9 * scale);
    }

    #[test]
    fn gradient_is_positive_and_monotone(s in spec(), x in -20.0f64..20.0, h in 1e-3f64..1.0) {
        let g0 = conjugate_grad(&s, x).unwrap();
        let g1 = conjugate_grad(&s, x + h).unwrap();
        prop_assert!(g0 >= 0.0);
        prop_assert!(g1 >= g0);
    }

    #[test]
    fn zero_is_fixed(s in spec()) {
        prop_assert_eq!(conjugate_eval(&s, 0.0).unwrap(), 0.0);
    }
}

#[test]
fn non_finite_inputs_are_domain_errors() {
    for s in [EntropySpec::Indicator, EntropySpec::SoftplusConjugate] {
        assert!(conjugate_eval(&s, f64::NAN).is_err());
        assert!(conjugate_grad(&s, f64::INFINITY).is_err());
    }
    assert!(conjugate_eval(&EntropySpec::ScaledKl { scale: 0.0 }, 1.0).is_err());
}
