mod common;

use common::checks::{self, q};
use common::oracle;
use fxnet::fxp::{convert, round_nearest, to_real, Exact, FxFormat, FxScalar, RoundingMode};
use proptest::prelude::*;

fn ok(c: checks::Check) {
    if let Err(e) = c {
        panic!("{e}");
    }
}

#[test]
fn stochastic_rounding_is_unbiased() {
    ok(checks::stochastic_unbiased(100, 100_000));
}

#[test]
fn stochastic_mean_of_three_eighths() {
    ok(checks::stochastic_example());
}

#[test]
fn midpoints_go_down() {
    ok(checks::midpoints_round_down(2000));
}

#[test]
fn conversion_matches_big_integer_reference() {
    ok(checks::convert_matches_oracle(50_000));
}

#[test]
fn nearest_is_monotone() {
    ok(checks::nearest_monotone(50_000));
}

#[test]
fn saturation_is_total() {
    ok(checks::saturation_total(2000));
}

#[test]
fn scalars_round_trip() {
    ok(checks::round_trip(10_000));
}

#[test]
fn keyed_draws_are_uniform() {
    ok(checks::rng_uniform(1_000_000));
}

#[test]
fn format_limits() {
    let f = q(2, 14);
    assert_eq!(f.epsilon(), 2f64.powi(-14));
    assert_eq!((f.lower(), f.upper()), (-2.0, 2.0 - 2f64.powi(-14)));
    assert_eq!(to_real(FxScalar::new(f.min_mantissa(), f).unwrap()).to_f64(), -2.0);
    assert_eq!(to_real(FxScalar::new(1, f).unwrap()).to_f64(), 2f64.powi(-14));
    assert!(FxFormat::new(0, 8).is_err());
    assert!(FxFormat::with_wl(1, 0).is_err());
}

fn any_exact() -> impl Strategy<Value = Exact> {
    prop_oneof![
        (any::<i64>(), -30i32..80).prop_map(|(n, s)| Exact::dyadic(n as i128, s)),
        (any::<i32>(), 1u32..5000).prop_map(|(n, d)| Exact::ratio(n as i128, d)),
        (-1e6f64..1e6).prop_map(|x| Exact::from_f64(x).unwrap()),
    ]
}

fn any_format() -> impl Strategy<Value = FxFormat> {
    (2u32..=32).prop_flat_map(|wl| (Just(wl), 0..wl)).prop_map(|(wl, fl)| FxFormat::with_wl(wl, fl).unwrap())
}

fn any_mode() -> impl Strategy<Value = RoundingMode> {
    prop_oneof![Just(RoundingMode::Nearest), Just(RoundingMode::Stochastic)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn convert_agrees_with_reference(x in any_exact(), f in any_format(), mode in any_mode(), draw in any::<u64>()) {
        prop_assert_eq!(convert(x, f, mode, draw).mantissa(), oracle::convert_exact(x, f, mode, draw));
    }

    #[test]
    fn result_stays_in_range(x in any_exact(), f in any_format(), mode in any_mode(), draw in any::<u64>()) {
        prop_assert!(f.contains_mantissa(convert(x, f, mode, draw).mantissa()));
    }

    #[test]
    fn nearest_within_half_ulp(n in -(1i64 << 40)..(1i64 << 40), s in 0i32..60, fl in 0u32..24) {
        let x = Exact::dyadic(n as i128, s);
        let f = FxFormat::new(8, fl).unwrap();
        let r = round_nearest(x, f);
        let err = r.checked_sub(x).unwrap().to_f64().abs();
        prop_assert!(err <= f.epsilon() / 2.0);
    }

    #[test]
    fn nearest_preserves_order(a in any_exact(), b in any_exact(), f in any_format()) {
        let (ma, mb) = (convert(a, f, RoundingMode::Nearest, 0).mantissa(), convert(b, f, RoundingMode::Nearest, 0).mantissa());
        if oracle::cmp(a, b).is_le() {
            prop_assert!(ma <= mb);
        } else {
            prop_assert!(ma >= mb);
        }
    }

    #[test]
    fn representable_values_are_fixed_points(f in any_format(), frac in 0.0f64..1.0, draw in any::<u64>(), mode in any_mode()) {
        let m = f.min_mantissa() + ((f.max_mantissa() - f.min_mantissa()) as f64 * frac) as i64;
        let s = FxScalar::new(m, f).unwrap();
        prop_assert_eq!(convert(to_real(s), f, mode, draw), s);
    }

    #[test]
    fn conversion_is_deterministic(x in any_exact(), f in any_format(), mode in any_mode(), draw in any::<u64>()) {
        prop_assert_eq!(convert(x, f, mode, draw), convert(x, f, mode, draw));
    }
}
