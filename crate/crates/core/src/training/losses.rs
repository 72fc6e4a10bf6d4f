use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::Discrepancy;
use crate::error::{Error, Result};
use crate::nn::MlpPolicy;
use crate::quant::{FakeQuantPolicy, QuantGradients};

/// One `(state, expert action)` pair with its loss weight.
#[derive(Debug, Clone, Copy)]
pub struct BatchSample<'a> {
    pub state: &'a [f64],
    pub action: &'a [f64],
    pub weight: f64,
    /// SIS flag of the state; required by the distillation term.
    pub flagged: Option<bool>,
    /// Precomputed full-precision action mean for `state`.
    pub teacher: Option<&'a [f64]>,
}

impl<'a> BatchSample<'a> {
    pub fn new(state: &'a [f64], action: &'a [f64]) -> Self {
        Self {
            state,
            action,
            weight: 1.0,
            flagged: None,
            teacher: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Batch<'a> {
    pub samples: Vec<BatchSample<'a>>,
}

impl<'a> Batch<'a> {
    pub fn new(samples: Vec<BatchSample<'a>>) -> Self {
        Self { samples }
    }

    fn total_weight(&self) -> Result<f64> {
        if self.samples.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        let mut total = 0.0;
        for s in &self.samples {
            if !(s.weight >= 0.0) || !s.weight.is_finite() {
                return Err(Error::usage("sample weights must be finite and >= 0"));
            }
            total += s.weight;
        }
        Ok(total)
    }

    pub fn flagged_count(&self) -> usize {
        self.samples.iter().filter(|s| s.flagged == Some(true)).count()
    }
}

/// Multipliers on the task and distillation terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub qat: f64,
    pub qrd: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self { qat: 1.0, qrd: 1.0 }
    }
}

/// Weighted loss terms of one batch. `l_sqil == l_qat + l_qrd` holds exactly.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_qat: f64,
    pub l_qrd: f64,
    pub l_sqil: f64,
    pub flagged: usize,
}

impl LossBreakdown {
    fn new(l_qat: f64, l_qrd: f64, flagged: usize) -> Self {
        Self {
            l_qat,
            l_qrd,
            l_sqil: l_qat + l_qrd,
            flagged,
        }
    }
}

/// Weighted mean negative log-likelihood of the expert actions under the
/// full-precision policy, constant term dropped.
pub fn loss_il(policy: &MlpPolicy, batch: &Batch<'_>) -> Result<f64> {
    let total = batch.total_weight()?;
    if total == 0.0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for s in &batch.samples {
        sum += s.weight * policy.nll(&policy.forward(s.state)?, s.action);
    }
    Ok(sum / total)
}

/// [`loss_il`] through the fake-quantized forward pass.
pub fn loss_qat(policy: &FakeQuantPolicy, batch: &Batch<'_>) -> Result<f64> {
    let total = batch.total_weight()?;
    if total == 0.0 {
        return Ok(0.0);
    }
    let base = policy.base();
    let mut sum = 0.0;
    for s in &batch.samples {
        sum += s.weight * base.nll(&policy.forward(s.state)?, s.action);
    }
    Ok(sum / total)
}

/// Value of the discrepancy and its gradient with respect to `mu_q`.
fn discrepancy(metric: Discrepancy, mu_q: &[f64], mu_fp: &[f64], sigma_q: f64, sigma_fp: f64) -> (f64, Vec<f64>) {
    let delta: Vec<f64> = mu_q.iter().zip(mu_fp).map(|(a, b)| a - b).collect();
    let sq: f64 = delta.iter().map(|d| d * d).sum();
    match metric {
        Discrepancy::L2 => (0.5 * sq, delta),
        Discrepancy::Kl => {
            let var_fp = sigma_fp * sigma_fp;
            let per_dim = (sigma_fp / sigma_q).ln() + sigma_q * sigma_q / (2.0 * var_fp) - 0.5;
            let value = per_dim * delta.len() as f64 + sq / (2.0 * var_fp);
            (value, delta.iter().map(|d| d / var_fp).collect())
        }
    }
}

fn teacher<'a>(s: &BatchSample<'a>, fp: &MlpPolicy) -> Result<Cow<'a, [f64]>> {
    match s.teacher {
        Some(t) => Ok(Cow::Borrowed(t)),
        None => Ok(Cow::Owned(fp.forward(s.state)?)),
    }
}

fn alpha(s: &BatchSample<'_>, beta: f64) -> Result<f64> {
    match s.flagged {
        Some(true) => Ok(beta),
        Some(false) => Ok(1.0),
        None => Err(Error::usage("distillation needs a SIS flag for every batch state")),
    }
}

/// Saliency-weighted distillation toward the full-precision policy:
/// `sum_i alpha_i w_i D_i / sum_i w_i` with `alpha_i = beta` on flagged states.
pub fn loss_qrd(
    policy: &FakeQuantPolicy,
    fp: &MlpPolicy,
    batch: &Batch<'_>,
    beta: f64,
    metric: Discrepancy,
) -> Result<f64> {
    let total = batch.total_weight()?;
    let alphas = batch
        .samples
        .iter()
        .map(|s| alpha(s, beta))
        .collect::<Result<Vec<_>>>()?;
    if total == 0.0 {
        return Ok(0.0);
    }
    let (sq, sf) = (policy.base().action_sigma(), fp.action_sigma());
    let mut sum = 0.0;
    for (s, a) in batch.samples.iter().zip(alphas) {
        let mu_fp = teacher(s, fp)?;
        let (d, _) = discrepancy(metric, &policy.forward(s.state)?, &mu_fp, sq, sf);
        sum += a * s.weight * d;
    }
    Ok(sum / total)
}

/// Both terms, each multiplied by its entry in `weights`. A zero-weighted
/// term is not evaluated, so the task term never needs SIS flags.
pub fn loss_sqil(
    policy: &FakeQuantPolicy,
    fp: &MlpPolicy,
    batch: &Batch<'_>,
    beta: f64,
    metric: Discrepancy,
    weights: TermWeights,
) -> Result<LossBreakdown> {
    let l_qat = if weights.qat != 0.0 {
        weights.qat * loss_qat(policy, batch)?
    } else {
        0.0
    };
    let l_qrd = if weights.qrd != 0.0 {
        weights.qrd * loss_qrd(policy, fp, batch, beta, metric)?
    } else {
        0.0
    };
    Ok(LossBreakdown::new(l_qat, l_qrd, batch.flagged_count()))
}

/// Loss and straight-through gradients of the weighted sum of both terms.
pub fn quant_gradients(
    policy: &FakeQuantPolicy,
    fp: &MlpPolicy,
    batch: &Batch<'_>,
    beta: f64,
    metric: Discrepancy,
    weights: TermWeights,
) -> Result<(QuantGradients, LossBreakdown)> {
    let total = batch.total_weight()?;
    let mut acc = policy.accumulator();
    let flagged = batch.flagged_count();
    if total == 0.0 {
        return Ok((policy.finish(acc), LossBreakdown::new(0.0, 0.0, flagged)));
    }
    let sigma = policy.base().action_sigma();
    let inv_var = 1.0 / (sigma * sigma);
    let (mut qat, mut qrd) = (0.0, 0.0);
    for s in &batch.samples {
        let trace = policy.forward_traced(s.state)?;
        let mu = trace.output();
        let c = s.weight / total;
        let mut grad = vec![0.0; mu.len()];
        if weights.qat != 0.0 {
            if s.action.len() != mu.len() {
                return Err(Error::usage("expert action has the wrong dimension"));
            }
            qat += c * policy.base().nll(mu, s.action);
            for ((g, m), a) in grad.iter_mut().zip(mu).zip(s.action) {
                *g += weights.qat * c * (m - a) * inv_var;
            }
        }
        if weights.qrd != 0.0 {
            let a = alpha(s, beta)?;
            let mu_fp = teacher(s, fp)?;
            let (d, dg) = discrepancy(metric, mu, &mu_fp, sigma, fp.action_sigma());
            qrd += c * a * d;
            for (g, v) in grad.iter_mut().zip(dg) {
                *g += weights.qrd * c * a * v;
            }
        }
        policy.backprop(&trace, &grad, &mut acc);
    }
    let breakdown = LossBreakdown::new(weights.qat * qat, weights.qrd * qrd, flagged);
    if !breakdown.l_sqil.is_finite() {
        return Err(Error::numeric("training loss is not finite"));
    }
    Ok((policy.finish(acc), breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Dense, Tensor2D};
    use crate::quant::{Granularity, QuantSpec};

    fn zero_policy() -> MlpPolicy {
        MlpPolicy::zeros(&[2, 2], 0.1).unwrap()
    }

    #[test]
    fn il_loss_of_single_sample() {
        let p = zero_policy();
        let b = Batch::new(vec![BatchSample::new(&[0.3, 0.4], &[1.0, 0.0])]);
        assert!((loss_il(&p, &b).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn il_loss_zero_on_exact_actions() {
        let p = MlpPolicy::from_layers(
            vec![Dense {
                weight: Tensor2D::identity(2),
                bias: vec![0.0; 2],
            }],
            0.1,
        )
        .unwrap();
        let b = Batch::new(vec![BatchSample::new(&[0.3, 0.4], &[0.3, 0.4])]);
        assert_eq!(loss_il(&p, &b).unwrap(), 0.0);
    }

    fn quantized(p: &MlpPolicy) -> FakeQuantPolicy {
        FakeQuantPolicy::ptq(p.clone(), QuantSpec::weight_only(8, Granularity::PerTensor), &[]).unwrap()
    }

    #[test]
    fn flagged_and_unflagged_average_to_one_and_a_half_d() {
        // Both samples see the same discrepancy: quantized policy is zero,
        // teacher outputs (1, 0) -> d = 0.5.
        let q = quantized(&zero_policy());
        let fp = zero_policy();
        let t = [1.0, 0.0];
        let mk = |flag| BatchSample {
            flagged: Some(flag),
            teacher: Some(&t),
            ..BatchSample::new(&[0.1, 0.2], &[0.0, 0.0])
        };
        let b = Batch::new(vec![mk(true), mk(false)]);
        let l = loss_qrd(&q, &fp, &b, 2.0, Discrepancy::L2).unwrap();
        assert!((l - 1.5 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn missing_flags_are_usage_error() {
        let q = quantized(&zero_policy());
        let b = Batch::new(vec![BatchSample::new(&[0.1, 0.2], &[0.0, 0.0])]);
        assert!(matches!(
            loss_qrd(&q, &zero_policy(), &b, 2.0, Discrepancy::L2),
            Err(Error::Usage(_))
        ));
        // The task term alone does not need flags.
        let w = TermWeights { qat: 1.0, qrd: 0.0 };
        assert!(loss_sqil(&q, &zero_policy(), &b, 2.0, Discrepancy::L2, w).is_ok());
    }

    #[test]
    fn kl_is_scaled_l2_for_equal_sigma() {
        let (l2, g2) = discrepancy(Discrepancy::L2, &[0.3, -0.1], &[0.0, 0.2], 0.1, 0.1);
        let (kl, gk) = discrepancy(Discrepancy::Kl, &[0.3, -0.1], &[0.0, 0.2], 0.1, 0.1);
        assert!((kl - l2 / 0.01).abs() < 1e-12);
        assert!((gk[0] - g2[0] / 0.01).abs() < 1e-12);
    }

    #[test]
    fn breakdown_is_additive_and_matches_gradient_pass() {
        let mut rng = crate::rng::rng_for(&[5]);
        let p = MlpPolicy::new(&[3, 8, 2], 0.1, &mut rng).unwrap();
        let q = quantized(&p);
        let states = [[0.1, 0.5, -0.2], [0.7, -0.3, 0.2]];
        let acts = [[0.2, -0.1], [0.0, 0.4]];
        let b = Batch::new(
            states
                .iter()
                .zip(&acts)
                .enumerate()
                .map(|(i, (s, a))| BatchSample {
                    flagged: Some(i == 0),
                    ..BatchSample::new(s, a)
                })
                .collect(),
        );
        let w = TermWeights::default();
        let l = loss_sqil(&q, &p, &b, 2.0, Discrepancy::L2, w).unwrap();
        assert_eq!(l.l_sqil, l.l_qat + l.l_qrd);
        assert_eq!(l.flagged, 1);
        let (_, g) = quant_gradients(&q, &p, &b, 2.0, Discrepancy::L2, w).unwrap();
        assert!((g.l_qat - l.l_qat).abs() < 1e-12);
        assert!((g.l_qrd - l.l_qrd).abs() < 1e-12);
    }
}
