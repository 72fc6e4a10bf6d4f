use std::io::Write;

use rand::Rng;

use super::losses::{quant_gradients, Batch, BatchSample, LossBreakdown};
use super::{TrainConfig, CALIBRATION_STATES};
use crate::envs::ExpertDataset;
use crate::error::{Error, Result};
use crate::nn::{adam_step, backward, AdamState, MlpPolicy, WeightedSample};
use crate::quant::{FakeQuantPolicy, QuantSpec};
use crate::rng::rng_for;
use crate::saliency::{threshold, SisTable};

const INIT_STREAM: u64 = 0x494E_4954;
const BATCH_STREAM: u64 = 0x4241_5443;
const CALIB_STREAM: u64 = 0x4341_4C49;

/// A trained policy and its per-step loss log.
#[derive(Debug, Clone)]
pub struct TrainRun<P> {
    pub policy: P,
    pub log: Vec<(usize, LossBreakdown)>,
}

/// `n` dataset states drawn uniformly with replacement.
pub fn calibration_states(dataset: &ExpertDataset, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let index = dataset.index();
    if index.is_empty() {
        return Vec::new();
    }
    let mut rng = rng_for(&[seed, CALIB_STREAM]);
    (0..n)
        .map(|_| {
            let (i, t) = index[rng.random_range(0..index.len())];
            dataset.trajectories[i].state(t).to_vec()
        })
        .collect()
}

/// Round-to-nearest post-training quantization of `fp`.
pub fn ptq(fp: &MlpPolicy, dataset: &ExpertDataset, spec: QuantSpec, seed: u64) -> Result<FakeQuantPolicy> {
    let calib = calibration_states(dataset, CALIBRATION_STATES, seed);
    FakeQuantPolicy::ptq(fp.clone(), spec, &calib)
}

fn sample_weights(dataset: &ExpertDataset, config: &TrainConfig) -> Vec<f64> {
    dataset
        .trajectories
        .iter()
        .map(|tr| {
            if config.per_trajectory_mean {
                1.0 / tr.len() as f64
            } else {
                1.0
            }
        })
        .collect()
}

fn check_inputs(dataset: &ExpertDataset, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    dataset.validate()
}

/// Full-precision behaviour cloning.
pub fn train_bc_fp(dataset: &ExpertDataset, config: &TrainConfig) -> Result<TrainRun<MlpPolicy>> {
    train_bc_fp_with(dataset, config, |_, _| Ok(()))
}

/// [`train_bc_fp`] calling `hook(step, policy)` every `checkpoint_every` steps.
pub fn train_bc_fp_with<F>(dataset: &ExpertDataset, config: &TrainConfig, mut hook: F) -> Result<TrainRun<MlpPolicy>>
where
    F: FnMut(usize, &MlpPolicy) -> Result<()>,
{
    check_inputs(dataset, config)?;
    let mut dims = vec![dataset.state_dim()];
    dims.extend(&config.hidden);
    dims.push(dataset.action_dim());
    let mut policy = MlpPolicy::new(&dims, config.action_sigma, &mut rng_for(&[config.seed, INIT_STREAM]))?;
    let sizes: Vec<usize> = policy.param_groups_mut().iter().map(|g| g.len()).collect();
    let mut adam = AdamState::new(config.lr, &sizes);
    let index = dataset.index();
    let weights = sample_weights(dataset, config);
    let mut rng = rng_for(&[config.seed, BATCH_STREAM]);
    let mut log = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let batch: Vec<WeightedSample<'_>> = (0..config.batch_size)
            .map(|_| {
                let (i, t) = index[rng.random_range(0..index.len())];
                let tr = &dataset.trajectories[i];
                WeightedSample {
                    state: tr.state(t),
                    target: tr.action(t),
                    weight: weights[i],
                }
            })
            .collect();
        adam.lr = config.lr_at(step);
        let (grads, loss) = backward(&policy, &batch)?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("loss diverged at step {step}")));
        }
        adam_step(&mut policy.param_groups_mut(), &grads.groups(), &mut adam)?;
        if !policy.is_finite() {
            return Err(Error::numeric(format!("weights diverged at step {step}")));
        }
        log.push((
            step,
            LossBreakdown {
                l_qat: loss,
                l_sqil: loss,
                ..Default::default()
            },
        ));
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            hook(step, &policy)?;
        }
    }
    Ok(TrainRun { policy, log })
}

/// Quantization-aware training of the QAT, QRD or SQIL arm, initialised from
/// the post-training-quantized `fp`.
pub fn train_quantized(
    fp: &MlpPolicy,
    dataset: &ExpertDataset,
    sis: Option<&SisTable>,
    spec: QuantSpec,
    config: &TrainConfig,
) -> Result<TrainRun<FakeQuantPolicy>> {
    train_quantized_with(fp, dataset, sis, spec, config, |_, _| Ok(()))
}

pub fn train_quantized_with<F>(
    fp: &MlpPolicy,
    dataset: &ExpertDataset,
    sis: Option<&SisTable>,
    spec: QuantSpec,
    config: &TrainConfig,
    mut hook: F,
) -> Result<TrainRun<FakeQuantPolicy>>
where
    F: FnMut(usize, &FakeQuantPolicy) -> Result<()>,
{
    check_inputs(dataset, config)?;
    let terms = config
        .arm
        .term_weights()
        .ok_or_else(|| Error::usage(format!("arm '{}' is not trained with quantization", config.arm)))?;
    let flags = if terms.qrd != 0.0 {
        let table = sis.ok_or_else(|| Error::usage("distillation arms need a SIS table"))?;
        let shape_ok = table.values.len() == dataset.trajectories.len()
            && table
                .values
                .iter()
                .zip(&dataset.trajectories)
                .all(|(v, tr)| v.len() == tr.len());
        if !shape_ok {
            return Err(Error::usage("SIS table does not match the dataset"));
        }
        let mut table = table.clone();
        if table.config.top_p != config.top_p || table.flags.is_empty() {
            threshold(&mut table, config.top_p)?;
        }
        Some(table.flags)
    } else {
        None
    };
    // Distillation targets are fixed; compute them once.
    let teacher: Option<Vec<Vec<Vec<f64>>>> = if terms.qrd != 0.0 {
        Some(
            dataset
                .trajectories
                .iter()
                .map(|tr| (0..tr.len()).map(|t| fp.forward(tr.state(t))).collect())
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let mut policy = ptq(fp, dataset, spec, config.seed)?;
    let mut adam = AdamState::new(config.lr, &policy.adam_group_sizes());
    let index = dataset.index();
    let weights = sample_weights(dataset, config);
    let mut rng = rng_for(&[config.seed, BATCH_STREAM]);
    let mut log = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let samples: Vec<BatchSample<'_>> = (0..config.batch_size)
            .map(|_| {
                let (i, t) = index[rng.random_range(0..index.len())];
                let tr = &dataset.trajectories[i];
                BatchSample {
                    state: tr.state(t),
                    action: tr.action(t),
                    weight: weights[i],
                    flagged: flags.as_ref().map(|f| f[i][t]),
                    teacher: teacher.as_ref().map(|c| c[i][t].as_slice()),
                }
            })
            .collect();
        let batch = Batch::new(samples);
        adam.lr = config.lr_at(step);
        let (grads, breakdown) = quant_gradients(&policy, fp, &batch, config.beta, config.discrepancy, terms)
            .map_err(|e| match e {
                Error::Numeric(m) => Error::numeric(format!("{m} at step {step}")),
                other => other,
            })?;
        policy.apply_adam(&grads, &mut adam)?;
        log.push((step, breakdown));
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            hook(step, &policy)?;
        }
    }
    Ok(TrainRun { policy, log })
}

/// Writes `step,l_qat,l_qrd,l_sqil,flagged_count` rows. For the
/// full-precision arm the first loss column holds the plain BC loss.
pub fn write_log_csv<W: Write>(log: &[(usize, LossBreakdown)], mut w: W) -> Result<()> {
    writeln!(w, "step,l_qat,l_qrd,l_sqil,flagged_count")?;
    for (step, b) in log {
        writeln!(w, "{step},{:e},{:e},{:e},{}", b.l_qat, b.l_qrd, b.l_sqil, b.flagged)?;
    }
    Ok(())
}
