mod common;

use std::time::Instant;

use common::grad::*;
use common::qmax;

#[test]
fn behaviour_cloning_gradient_matches_finite_differences() {
    let failures: Vec<String> = (0..SEEDS).flat_map(check_il_gradients).collect();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn quantized_loss_gradients_match_straight_through_finite_differences() {
    let start = Instant::now();
    let failures: Vec<String> = (0..SEEDS).flat_map(check_quant_gradients).collect();
    assert!(failures.is_empty(), "{failures:#?}");
    assert!(start.elapsed().as_secs_f64() < 30.0, "took {:?}", start.elapsed());
}

#[test]
fn clipping_is_exercised() {
    // The shrunk scales must leave some weights outside the code range,
    // otherwise the clipped branch of the scale gradient goes unchecked.
    let clipped = (0..SEEDS)
        .filter(|s| {
            let case = quant_case(*s);
            let p = case.fq.params().unwrap();
            case.fq.base().layers().iter().enumerate().any(|(l, layer)| {
                let cols = layer.weight.cols();
                layer.weight.data().iter().enumerate().any(|(i, w)| {
                    let g = p.weight_scales[l][if p.weight_scales[l].len() == 1 { 0 } else { i / cols }];
                    (w / g).round().abs() > qmax(case.fq.spec().bits)
                })
            })
        })
        .count();
    assert!(clipped >= SEEDS as usize / 2, "only {clipped} seeds clip");
}
