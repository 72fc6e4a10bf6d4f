mod common;

use common::identities::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn sqil_is_sum_of_terms_and_unit_beta_is_uniform_distillation(seed in 0u64..10_000, beta in 1.0f64..4.0, kl: bool) {
        check_losses(seed, beta, kl)?;
    }

    #[test]
    fn flagged_fraction_tracks_top_p(values in sis_values(), p in 0.01f64..0.99) {
        check_flag_fraction(values, p)?;
    }
}

#[test]
fn default_top_p_on_ten_values() {
    check_flag_fraction(vec![(1..=10).map(f64::from).collect()], 0.2).unwrap();
}
