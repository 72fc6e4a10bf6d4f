//! Rollouts, success-rate reports, action-discrepancy timelines and
//! saliency-map divergence between two policies.

mod plot;

pub use plot::line_plot_svg;

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvId, Environment, ExpertDataset, Lane, ObsMode, PickPlace};
use crate::error::{Error, Result};
use crate::nn::Policy;
use crate::rng::{mix_seed, rng_for};
use crate::saliency::{saliency_map, PerturbKey, PerturbationSpec, SisTable};

/// Default episodes per evaluation round.
pub const DEFAULT_EPISODES: usize = 500;
pub const DEFAULT_ROUNDS: usize = 3;
/// States sampled for the saliency divergence.
pub const DIVERGENCE_STATES: usize = 256;
const EVAL_STREAM: u64 = 0x4556_414C;
const DIVERGENCE_STREAM: u64 = 0x4449_5645;
/// Smoothing added to normalised saliency maps before the KL.
const MAP_EPS: f64 = 1e-10;

/// One policy-driven episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub seed: u64,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// Environment-defined mission-critical flag of each visited state.
    pub critical: Vec<bool>,
    pub success: bool,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

fn run<E, F>(env: &E, mode: ObsMode, seed: u64, cap: usize, mut act: F) -> Result<Rollout>
where
    E: Environment,
    F: FnMut(&E::State, &[f64]) -> Result<Vec<f64>>,
{
    if !env.supports(mode) {
        return Err(Error::usage("environment does not support this observation mode"));
    }
    let mut state = env.reset(seed);
    let mut out = Rollout {
        seed,
        observations: Vec::new(),
        actions: Vec::new(),
        critical: Vec::new(),
        success: false,
    };
    for _ in 0..cap.min(env.max_steps()) {
        let obs: Vec<f64> = env.observe(&state, mode).iter().map(|v| *v as f32 as f64).collect();
        let a = act(&state, &obs)?;
        out.critical.push(env.is_critical(&state));
        let step = env.step(&state, &a);
        out.observations.push(obs);
        out.actions.push(a);
        state = step.state;
        if step.done {
            out.success = step.success;
            break;
        }
    }
    Ok(out)
}

/// Runs `policy` from the reset state of `seed` for at most `cap` steps.
pub fn rollout<P: Policy + ?Sized>(policy: &P, env: EnvId, mode: ObsMode, seed: u64, cap: usize) -> Result<Rollout> {
    match env {
        EnvId::Pickplace => run(&PickPlace, mode, seed, cap, |_, o| policy.act(o)),
        EnvId::Lane => run(&Lane, mode, seed, cap, |_, o| policy.act(o)),
    }
}

/// Runs the scripted expert.
pub fn rollout_expert(env: EnvId, mode: ObsMode, seed: u64, cap: usize) -> Result<Rollout> {
    match env {
        EnvId::Pickplace => run(&PickPlace, mode, seed, cap, |s, _| Ok(PickPlace.expert_action(s))),
        EnvId::Lane => run(&Lane, mode, seed, cap, |s, _| Ok(Lane.expert_action(s))),
    }
}

/// Seed of evaluation episode `m` in `round`. Never collides with the
/// two-part seeds used for expert datasets.
pub fn eval_seed(base: u64, round: usize, m: usize) -> u64 {
    mix_seed(&[EVAL_STREAM, base, round as u64, m as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arm: String,
    pub episodes: usize,
    pub rounds: usize,
    /// Percent, mean over rounds.
    pub success_rate: f64,
    /// Percent, population standard deviation over rounds.
    pub success_std: f64,
    pub per_round: Vec<f64>,
    pub mean_length: f64,
    /// Sparse return: 1 for a successful episode.
    pub mean_return: f64,
}

/// Success rate of `policy` over `rounds` rounds of `episodes` fresh episodes.
pub fn success_rate<P: Policy + ?Sized>(
    arm: &str,
    policy: &P,
    env: EnvId,
    mode: ObsMode,
    episodes: usize,
    rounds: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 || rounds == 0 {
        return Err(Error::usage("need at least one episode and one round"));
    }
    let cap = usize::MAX;
    let jobs: Vec<(usize, usize)> = (0..rounds).flat_map(|r| (0..episodes).map(move |m| (r, m))).collect();
    let results: Vec<(bool, usize)> = jobs
        .par_iter()
        .map(|&(r, m)| rollout(policy, env, mode, eval_seed(seed, r, m), cap).map(|ro| (ro.success, ro.len())))
        .collect::<Result<_>>()?;
    let per_round: Vec<f64> = results
        .chunks(episodes)
        .map(|c| 100.0 * c.iter().filter(|(s, _)| *s).count() as f64 / episodes as f64)
        .collect();
    let mean = per_round.iter().sum::<f64>() / rounds as f64;
    let var = per_round.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rounds as f64;
    let n = results.len() as f64;
    Ok(EvalReport {
        arm: arm.to_string(),
        episodes,
        rounds,
        success_rate: mean,
        success_std: var.sqrt(),
        per_round,
        mean_length: results.iter().map(|(_, l)| *l as f64).sum::<f64>() / n,
        mean_return: results.iter().filter(|(s, _)| *s).count() as f64 / n,
    })
}

/// Per-timestep action distance between a quantized policy and its
/// full-precision reference on the quantized policy's own rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyTimeline {
    pub seed: u64,
    pub values: Vec<f64>,
    pub critical: Vec<bool>,
    pub success: bool,
}

impl DiscrepancyTimeline {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn median(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        crate::saliency::quantile(&self.values, 0.5)
    }

    /// Writes `t,l2` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,l2")?;
        for (t, v) in self.values.iter().enumerate() {
            writeln!(w, "{t},{v:e}")?;
        }
        Ok(())
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_dims<Q: Policy + ?Sized, F: Policy + ?Sized>(q: &Q, fp: &F) -> Result<()> {
    if q.input_dim() != fp.input_dim() || q.output_dim() != fp.output_dim() {
        return Err(Error::usage("policies have different input or output sizes"));
    }
    Ok(())
}

pub fn discrepancy_timeline<Q: Policy + ?Sized, F: Policy + ?Sized>(
    quantized: &Q,
    fp: &F,
    env: EnvId,
    mode: ObsMode,
    seed: u64,
) -> Result<DiscrepancyTimeline> {
    check_dims(quantized, fp)?;
    let ro = rollout(quantized, env, mode, seed, usize::MAX)?;
    let values = ro
        .observations
        .iter()
        .zip(&ro.actions)
        .map(|(o, a)| Ok(l2(a, &fp.act(o)?)))
        .collect::<Result<_>>()?;
    Ok(DiscrepancyTimeline {
        seed,
        values,
        critical: ro.critical,
        success: ro.success,
    })
}

/// Mean action distance over the dataset states flagged in `table`
/// (`flagged = true`) or over the rest (`flagged = false`).
pub fn flagged_discrepancy<Q: Policy + ?Sized, F: Policy + ?Sized>(
    quantized: &Q,
    fp: &F,
    dataset: &ExpertDataset,
    table: &SisTable,
    flagged: bool,
) -> Result<f64> {
    check_dims(quantized, fp)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, tr) in dataset.trajectories.iter().enumerate() {
        for t in 0..tr.len() {
            let f = table
                .flag(i, t)
                .ok_or_else(|| Error::usage("SIS table does not match the dataset"))?;
            if f == flagged {
                sum += l2(&quantized.act(tr.state(t))?, &fp.act(tr.state(t))?);
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

fn normalise(map: &[f64]) -> Vec<f64> {
    let k = map.len() as f64;
    let total: f64 = map.iter().sum();
    let p: Vec<f64> = if total < 1e-12 {
        vec![1.0 / k; map.len()]
    } else {
        map.iter().map(|v| v / total).collect()
    };
    p.iter().map(|v| (v + MAP_EPS) / (1.0 + k * MAP_EPS)).collect()
}

/// `KL(p || q) + KL(q || p)` of two saliency maps after normalising each to
/// sum one.
pub fn symmetric_kl(a: &[f64], b: &[f64]) -> f64 {
    let (p, q) = (normalise(a), normalise(b));
    p.iter().zip(&q).map(|(x, y)| (x - y) * (x / y).ln()).sum()
}

/// Mean symmetric KL between the saliency maps of the two policies over a
/// fixed sample of dataset states. Both maps use identical perturbations.
pub fn saliency_divergence<Q: Policy + ?Sized, F: Policy + ?Sized>(
    quantized: &Q,
    fp: &F,
    dataset: &ExpertDataset,
    spec: &PerturbationSpec,
    seed: u64,
) -> Result<f64> {
    check_dims(quantized, fp)?;
    let index = dataset.index();
    if index.is_empty() {
        return Err(Error::usage("cannot sample states from an empty dataset"));
    }
    let mut rng = rng_for(&[seed, DIVERGENCE_STREAM]);
    let picks: Vec<(usize, usize)> = (0..DIVERGENCE_STATES)
        .map(|_| index[rng.random_range(0..index.len())])
        .collect();
    let divs: Vec<f64> = picks
        .par_iter()
        .map(|&(i, t)| {
            let key = PerturbKey {
                traj: i as u64,
                t: t as u64,
            };
            let s = dataset.trajectories[i].state(t);
            Ok(symmetric_kl(
                &saliency_map(quantized, s, spec, key)?,
                &saliency_map(fp, s, spec, key)?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(divs.iter().sum::<f64>() / divs.len() as f64)
}
