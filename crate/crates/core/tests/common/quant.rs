//! Property suite for the scalar quantizer.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use sqil::quant::{dequantize, fake_quant, quantize};

use super::{qmax, qmin, quantize_ref};

#[derive(Debug, Clone)]
pub struct QCase {
    pub bits: u32,
    pub gamma: f64,
    /// Inputs in units of `gamma`.
    pub u1: f64,
    pub u2: f64,
    pub shift: i32,
}

fn unit(bits: u32) -> impl Strategy<Value = f64> {
    let half = (1i64 << (bits - 1)) as f64;
    prop_oneof![
        3 => -1.5 * half..1.5 * half,
        1 => (-(half as i64) - 4..(half as i64) + 4).prop_map(|n| n as f64 + 0.5),
    ]
}

pub fn qcase() -> impl Strategy<Value = QCase> {
    (2u32..=16)
        .prop_flat_map(|bits| (Just(bits), -12.0f64..6.0, unit(bits), unit(bits), -30i32..30))
        .prop_map(|(bits, lg, u1, u2, shift)| QCase { bits, gamma: lg.exp2(), u1, u2, shift })
}

pub fn check(c: &QCase) -> Result<(), TestCaseError> {
    let (b, g) = (c.bits, c.gamma);
    let (x1, x2) = (c.u1 * g, c.u2 * g);
    let q1 = quantize(x1, g, b).map_err(|e| TestCaseError::fail(e.to_string()))? as i64;
    let q2 = quantize(x2, g, b).unwrap() as i64;
    prop_assert!(q1 >= qmin(b) as i64 && q1 <= qmax(b) as i64, "code {} out of range for {} bits", q1, b);
    prop_assert_eq!(q1, quantize_ref(x1, g, b));
    if x1 <= x2 {
        prop_assert!(q1 <= q2, "not monotone: q({}) = {} > q({}) = {}", x1, q1, x2, q2);
    } else {
        prop_assert!(q1 >= q2);
    }
    let s = (c.shift as f64).exp2();
    prop_assert_eq!(quantize(x1 * s, g * s, b).unwrap() as i64, q1, "power-of-two rescaling changed the code");
    let back = dequantize(q1 as i32, g);
    prop_assert_eq!(back.to_bits(), fake_quant(x1, g, b).to_bits());
    if x1 >= qmin(b) * g && x1 <= qmax(b) * g {
        // Slack of a few ulps: x1 itself is a rounded product.
        prop_assert!((back - x1).abs() <= 0.5 * g + 4.0 * f64::EPSILON * x1.abs(), "round trip {} -> {} at scale {}", x1, back, g);
    }
    Ok(())
}

/// Runs `cases` random cases; returns the first failure.
pub fn run(cases: u32) -> Result<(), String> {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner.run(&qcase(), |c| check(&c)).map_err(|e| e.to_string())
}
