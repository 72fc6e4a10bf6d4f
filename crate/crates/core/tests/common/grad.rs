//! Finite-difference checks of the analytic loss gradients.

use rand::Rng;
use sqil::nn::{backward, MlpPolicy, WeightedSample};
use sqil::quant::{FakeQuantPolicy, Granularity, QuantParams, QuantSpec, Scheme, Targets};
use sqil::rng::rng_for;
use sqil::training::{loss_il, loss_qat, loss_qrd, quant_gradients, Batch, BatchSample, Discrepancy, TermWeights};

use super::*;

pub const SEEDS: u64 = 20;
const KINK: f64 = 1e-3;
const H: f64 = 1e-6;

fn spec_for(seed: u64) -> QuantSpec {
    let (bits, granularity, targets) = match seed % 4 {
        0 => (4, Granularity::PerTensor, Targets::WeightsActivations),
        1 => (4, Granularity::PerChannel, Targets::WeightsActivations),
        2 => (3, Granularity::PerChannel, Targets::WeightsOnly),
        _ => (8, Granularity::PerTensor, Targets::WeightsActivations),
    };
    QuantSpec { bits, granularity, scheme: Scheme::Lsq, targets }
}

fn random_dims<R: Rng>(rng: &mut R) -> Vec<usize> {
    vec![rng.random_range(3..8), rng.random_range(6..14), rng.random_range(6..14), rng.random_range(2..4)]
}

pub struct Case {
    pub fq: FakeQuantPolicy,
    pub fp: MlpPolicy,
    pub samples: Vec<Sample>,
}

/// A calibrated policy with shrunk scales (so some weights and activations
/// clip) whose hidden pre-activations all sit at least `KINK` from zero.
pub fn quant_case(seed: u64) -> Case {
    for attempt in 0.. {
        let mut rng = rng_for(&[seed, attempt]);
        let dims = random_dims(&mut rng);
        let base = MlpPolicy::new(&dims, 0.1, &mut rng).unwrap();
        let fp = MlpPolicy::new(&dims, 0.15, &mut rng).unwrap();
        let states: Vec<Vec<f64>> = (0..6).map(|_| uniform_vec(&mut rng, dims[0], -1.5, 1.5)).collect();
        let spec = spec_for(seed);
        let fq = FakeQuantPolicy::ptq(base.clone(), spec, &states).unwrap();
        let p = fq.params().unwrap();
        let params = QuantParams {
            weight_scales: p
                .weight_scales
                .iter()
                .map(|g| g.iter().map(|v| v * rng.random_range(0.6..1.0)).collect())
                .collect(),
            act_scales: p.act_scales.iter().map(|v| v * rng.random_range(0.6..1.2)).collect(),
            ..p.clone()
        };
        let fq = FakeQuantPolicy::from_parts(base, spec, params).unwrap();
        let (_, pre) = QNet::from_policy(&fq).freeze(&states);
        if pre.iter().any(|z| z.abs() < KINK) {
            continue;
        }
        let samples = states
            .into_iter()
            .map(|state| Sample {
                action: uniform_vec(&mut rng, dims[3], -1.0, 1.0),
                weight: rng.random_range(0.2..2.0),
                flagged: rng.random_bool(0.4),
                teacher: fp.forward(&state).unwrap(),
                state,
            })
            .collect();
        return Case { fq, fp, samples };
    }
    unreachable!()
}

fn batch(samples: &[Sample]) -> Batch<'_> {
    Batch::new(
        samples
            .iter()
            .map(|s| BatchSample {
                state: &s.state,
                action: &s.action,
                weight: s.weight,
                flagged: Some(s.flagged),
                teacher: Some(&s.teacher),
            })
            .collect(),
    )
}

fn loss_specs() -> Vec<(&'static str, LossSpec, Discrepancy)> {
    let mk = |qat, qrd, metric| LossSpec { qat, qrd, beta: 2.0, metric, teacher_sigma: 0.15 };
    vec![
        ("qat", mk(1.0, 0.0, Metric::L2), Discrepancy::L2),
        ("qrd-l2", mk(0.0, 1.0, Metric::L2), Discrepancy::L2),
        ("qrd-kl", mk(0.0, 1.0, Metric::Kl), Discrepancy::Kl),
        ("sqil-l2", mk(1.0, 1.0, Metric::L2), Discrepancy::L2),
        ("sqil-kl", mk(1.0, 1.0, Metric::Kl), Discrepancy::Kl),
    ]
}

/// Worst relative error over parameter groups, split into latent parameters
/// and scales.
fn compare(net: &QNet, analytic: &[f64], fd: &[f64]) -> (f64, f64) {
    let (mut params, mut scales) = (0.0f64, 0.0f64);
    for g in net.groups() {
        if g.is_empty() {
            continue;
        }
        let e = max_rel_err(&analytic[g.clone()], &fd[g.clone()]);
        if net.is_scale(g.start) {
            scales = scales.max(e);
        } else {
            params = params.max(e);
        }
    }
    (params, scales)
}

pub fn check_quant_gradients(seed: u64) -> Vec<String> {
    let case = quant_case(seed);
    let net = QNet::from_policy(&case.fq);
    let states: Vec<Vec<f64>> = case.samples.iter().map(|s| s.state.clone()).collect();
    let (res, _) = net.freeze(&states);
    let b = batch(&case.samples);
    let mut failures = Vec::new();
    for (name, spec, metric) in loss_specs() {
        let weights = TermWeights { qat: spec.qat, qrd: spec.qrd };
        let (grads, lb) = quant_gradients(&case.fq, &case.fp, &b, spec.beta, metric, weights).unwrap();
        let (sq, sd) = surrogate_loss(&net, &res, &case.samples, &spec);
        let lib_qat = spec.qat * loss_qat(&case.fq, &b).unwrap();
        let lib_qrd = spec.qrd * loss_qrd(&case.fq, &case.fp, &b, spec.beta, metric).unwrap();
        for (what, got, want) in [("l_qat", lb.l_qat, sq), ("l_qrd", lb.l_qrd, sd), ("loss_qat", lib_qat, sq), ("loss_qrd", lib_qrd, sd)] {
            if (got - want).abs() > 1e-10 * want.abs().max(1.0) {
                failures.push(format!("seed {seed} {name}: {what} {got} vs oracle {want}"));
            }
        }
        let fd = surrogate_fd(&net, &res, &case.samples, &spec, H);
        let (ep, es) = compare(&net, &grads.flatten(), &fd);
        if ep > 1e-4 || es > 1e-3 {
            failures.push(format!("seed {seed} {name}: param err {ep:.2e}, scale err {es:.2e}"));
        }
    }
    failures
}

pub fn check_il_gradients(seed: u64) -> Vec<String> {
    let mut attempt = 0u64;
    loop {
        let mut rng = rng_for(&[1000 + seed, attempt]);
        attempt += 1;
        let dims = random_dims(&mut rng);
        let policy = MlpPolicy::new(&dims, 0.1, &mut rng).unwrap();
        let states: Vec<Vec<f64>> = (0..6).map(|_| uniform_vec(&mut rng, dims[0], -1.5, 1.5)).collect();
        let actions: Vec<Vec<f64>> = (0..6).map(|_| uniform_vec(&mut rng, dims[3], -1.0, 1.0)).collect();
        let weights: Vec<f64> = (0..6).map(|_| rng.random_range(0.2..2.0)).collect();
        let (w, b) = raw_params(&policy);
        // Hidden pre-activations of the oracle forward pass.
        let near_kink = states.iter().any(|s| {
            let mut h = s.clone();
            for l in 0..w.len() - 1 {
                let z = mlp_ref(&w[l..=l], &b[l..=l], &h);
                if z.iter().any(|v| v.abs() < KINK) {
                    return true;
                }
                h = z.iter().map(|v| v.max(0.0)).collect();
            }
            false
        });
        if near_kink {
            continue;
        }
        let oracle = |w: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
            let total: f64 = weights.iter().sum();
            states
                .iter()
                .zip(&actions)
                .zip(&weights)
                .map(|((s, a), c)| c * nll_ref(&mlp_ref(w, b, s), a, 0.1))
                .sum::<f64>()
                / total
        };
        let batch: Vec<WeightedSample> = states
            .iter()
            .zip(&actions)
            .zip(&weights)
            .map(|((s, a), c)| WeightedSample { state: s, target: a, weight: *c })
            .collect();
        let (grads, loss) = backward(&policy, &batch).unwrap();
        let mut failures = Vec::new();
        let lib = loss_il(
            &policy,
            &Batch::new(
                batch
                    .iter()
                    .map(|s| BatchSample { weight: s.weight, ..BatchSample::new(s.state, s.target) })
                    .collect(),
            ),
        )
        .unwrap();
        let want = oracle(&w, &b);
        for got in [loss, lib] {
            if (got - want).abs() > 1e-10 * want.max(1.0) {
                failures.push(format!("seed {seed} il: loss {got} vs oracle {want}"));
            }
        }
        let analytic = grads.groups();
        for l in 0..w.len() {
            for (is_bias, got) in [(false, analytic[2 * l]), (true, analytic[2 * l + 1])] {
                let fd: Vec<f64> = (0..got.len())
                    .map(|i| {
                        let (mut wp, mut bp) = (w.clone(), b.clone());
                        let (mut wm, mut bm) = (w.clone(), b.clone());
                        if is_bias {
                            bp[l][i] += H;
                            bm[l][i] -= H;
                        } else {
                            wp[l][i] += H;
                            wm[l][i] -= H;
                        }
                        (oracle(&wp, &bp) - oracle(&wm, &bm)) / (2.0 * H)
                    })
                    .collect();
                let e = max_rel_err(got, &fd);
                if e > 1e-4 {
                    failures.push(format!("seed {seed} il layer {l} bias={is_bias}: err {e:.2e}"));
                }
            }
        }
        return failures;
    }
}

