mod common;

use std::time::Instant;

use proptest::prelude::*;
use sqil::quant::{quantize, qmax, qmin};

proptest! {
    #![proptest_config(ProptestConfig { cases: 2048, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn quantizer_properties(c in common::quant::qcase()) {
        common::quant::check(&c)?;
    }

    #[test]
    fn codes_stay_in_range_for_huge_inputs(x in -1e300f64..1e300, bits in 2u32..=16) {
        let q = quantize(x, 1e-3, bits).unwrap() as i64;
        prop_assert!(q >= qmin(bits) && q <= qmax(bits));
    }
}

#[test]
fn hundred_thousand_cases_under_five_seconds() {
    let start = Instant::now();
    common::quant::run(100_000).unwrap();
    let t = start.elapsed();
    assert!(t.as_secs_f64() < 5.0, "took {t:?}");
}

#[test]
fn extreme_codes() {
    for bits in 2..=16 {
        assert_eq!(quantize(f64::MAX, 1.0, bits).unwrap() as i64, qmax(bits));
        assert_eq!(quantize(f64::MIN, 1.0, bits).unwrap() as i64, qmin(bits));
        assert_eq!(quantize(-0.0, 1.0, bits).unwrap(), 0);
    }
    assert!(quantize(f64::INFINITY, 1.0, 4).is_err());
    assert!(quantize(1.0, 1.0, 17).is_err());
}
