//! Structural identities of the loss family and of SIS thresholding.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use sqil::saliency::{threshold, PerturbationSpec, SisConfig, SisTable};
use sqil::training::{loss_qat, loss_qrd, loss_sqil, quant_gradients, Batch, BatchSample, Discrepancy, TermWeights};

use super::grad::quant_case;
use super::{dist_ref, Metric};

fn batch(case: &super::grad::Case, flags: impl Fn(usize) -> bool) -> Batch<'_> {
    Batch::new(
        case.samples
            .iter()
            .enumerate()
            .map(|(i, s)| BatchSample {
                state: &s.state,
                action: &s.action,
                weight: s.weight,
                flagged: Some(flags(i)),
                teacher: Some(&s.teacher),
            })
            .collect(),
    )
}

/// `l_sqil == l_qat + l_qrd` bit for bit, and with `beta = 1` the flags
/// have no effect on the distillation term or its gradients.
pub fn check_losses(seed: u64, beta: f64, kl: bool) -> Result<(), TestCaseError> {
    let case = quant_case(seed);
    let b = batch(&case, |i| case.samples[i].flagged);
    let metric = if kl { Discrepancy::Kl } else { Discrepancy::L2 };
    let lb = loss_sqil(&case.fq, &case.fp, &b, beta, metric, TermWeights::default()).unwrap();
    let qat = loss_qat(&case.fq, &b).unwrap();
    let qrd = loss_qrd(&case.fq, &case.fp, &b, beta, metric).unwrap();
    prop_assert_eq!(lb.l_sqil.to_bits(), (qat + qrd).to_bits());
    prop_assert_eq!(lb.l_qat.to_bits(), qat.to_bits());
    prop_assert_eq!(lb.l_qrd.to_bits(), qrd.to_bits());
    let (_, gb) = quant_gradients(&case.fq, &case.fp, &b, beta, metric, TermWeights::default()).unwrap();
    prop_assert_eq!(gb.l_sqil.to_bits(), (gb.l_qat + gb.l_qrd).to_bits());

    let uniform = batch(&case, |_| false);
    let flagged = batch(&case, |i| case.samples[i].flagged);
    let w = TermWeights { qat: 0.0, qrd: 1.0 };
    let u = loss_qrd(&case.fq, &case.fp, &uniform, 1.0, metric).unwrap();
    let f = loss_qrd(&case.fq, &case.fp, &flagged, 1.0, metric).unwrap();
    prop_assert_eq!(u.to_bits(), f.to_bits());
    let total: f64 = case.samples.iter().map(|s| s.weight).sum();
    let sigma = case.fq.base().action_sigma();
    let want = case
        .samples
        .iter()
        .map(|s| {
            let mu = case.fq.forward(&s.state).unwrap();
            let m = if kl { Metric::Kl } else { Metric::L2 };
            s.weight * dist_ref(m, &mu, &s.teacher, sigma, case.fp.action_sigma())
        })
        .sum::<f64>()
        / total;
    prop_assert!((u - want).abs() <= 1e-12 * want.abs().max(1.0), "uniform distillation {} vs {}", u, want);
    let (gu, _) = quant_gradients(&case.fq, &case.fp, &uniform, 1.0, metric, w).unwrap();
    let (gf, _) = quant_gradients(&case.fq, &case.fp, &flagged, 1.0, metric, w).unwrap();
    prop_assert_eq!(gu, gf);
    Ok(())
}

fn table(values: Vec<Vec<f64>>) -> SisTable {
    SisTable {
        config: SisConfig { perturbation: PerturbationSpec::vector(0.1), frame_stride: 1, top_p: 0.2, beta: 2.0 },
        computed: values.iter().map(Vec::len).collect(),
        values,
        threshold: 0.0,
        flags: Vec::new(),
    }
}

/// Flagged fraction of a table of distinct values is within `1/M` of `p`.
pub fn check_flag_fraction(values: Vec<Vec<f64>>, p: f64) -> Result<(), TestCaseError> {
    let mut t = table(values);
    threshold(&mut t, p).unwrap();
    let m = t.total() as f64;
    let frac = t.flagged() as f64 / m;
    prop_assert!((frac - p).abs() <= 1.0 / m + 1e-12, "flagged {} of {} at p = {}", t.flagged(), m, p);
    for (row, flags) in t.values.iter().zip(&t.flags) {
        for (v, f) in row.iter().zip(flags) {
            prop_assert_eq!(*f, *v > t.threshold);
        }
    }
    Ok(())
}

/// Ragged tables of distinct non-negative values.
pub fn sis_values() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(1usize..40, 1..12).prop_flat_map(|lens| {
        let n: usize = lens.iter().sum();
        prop::collection::hash_set(0u32..1_000_000, n).prop_map(move |set| {
            let mut it = set.into_iter().map(|v| v as f64 * 1e-3);
            lens.iter().map(|l| it.by_ref().take(*l).collect()).collect()
        })
    })
}

pub fn run(cases: u32) -> Result<(), String> {
    let cfg = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new(cfg.clone())
        .run(&(0u64..10_000, 1.0f64..4.0, any::<bool>()), |(s, b, kl)| check_losses(s, b, kl))
        .map_err(|e| e.to_string())?;
    TestRunner::new(cfg)
        .run(&(sis_values(), 0.01f64..0.99), |(v, p)| check_flag_fraction(v, p))
        .map_err(|e| e.to_string())
}
