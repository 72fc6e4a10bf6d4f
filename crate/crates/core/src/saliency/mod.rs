//! Perturbation saliency and state-importance scores.
//!
//! The saliency of position `k` of a state is half the squared distance
//! between the action means before and after perturbing that position. The
//! state-importance score (SIS) is the uniform mean of those saliencies over
//! every position. Tables of SIS values are computed once per (policy,
//! dataset) with an optional frame stride, and thresholded at a global
//! top-`p` quantile to flag mission-critical states.

mod blur;

pub use blur::gaussian_blur;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::ExpertDataset;
use crate::error::{Error, Result};
use crate::nn::Policy;
use crate::rng::rng_for;

/// Default fraction of timesteps flagged as important.
pub const DEFAULT_TOP_P: f64 = 0.2;
pub const DEFAULT_VECTOR_SIGMA: f64 = 0.1;
pub const DEFAULT_GRID: usize = 8;
pub const DEFAULT_BLUR_RADIUS: usize = 3;
pub const DEFAULT_FRAME_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PerturbationMode {
    /// Additive Gaussian noise on one state dimension.
    VectorNoise { sigma: f64 },
    /// Gaussian blur of one patch of an `grid x grid` partition of a square image.
    ImageBlur { grid: usize, radius: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub mode: PerturbationMode,
    /// Base seed for per-call noise.
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn vector(sigma: f64) -> Self {
        Self {
            mode: PerturbationMode::VectorNoise { sigma },
            seed: 0,
        }
    }

    pub fn image(grid: usize, radius: usize) -> Self {
        Self {
            mode: PerturbationMode::ImageBlur { grid, radius },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            PerturbationMode::VectorNoise { sigma } if !(sigma > 0.0) || !sigma.is_finite() => {
                Err(Error::usage("perturbation sigma must be > 0"))
            }
            PerturbationMode::ImageBlur { grid, radius } if grid == 0 || radius == 0 => {
                Err(Error::usage("grid size and blur radius must be >= 1"))
            }
            _ => Ok(()),
        }
    }

    /// Number of perturbation positions for a state of length `state_len`.
    pub fn positions(&self, state_len: usize) -> Result<usize> {
        self.validate()?;
        match self.mode {
            PerturbationMode::VectorNoise { .. } => Ok(state_len),
            PerturbationMode::ImageBlur { grid, .. } => {
                image_side(state_len, grid)?;
                Ok(grid * grid)
            }
        }
    }
}

fn image_side(len: usize, grid: usize) -> Result<usize> {
    let side = (len as f64).sqrt().round() as usize;
    if side * side != len {
        return Err(Error::usage(format!("state of length {len} is not a square image")));
    }
    if side % grid != 0 {
        return Err(Error::usage(format!("grid {grid} does not divide image side {side}")));
    }
    Ok(side)
}

/// Identifies the call site so that per-call noise is reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PerturbKey {
    pub traj: u64,
    pub t: u64,
}

/// Precomputed pieces shared by all positions of one state.
struct Prepared {
    blurred: Option<Vec<f64>>,
    side: usize,
}

fn prepare(state: &[f64], spec: &PerturbationSpec) -> Result<Prepared> {
    match spec.mode {
        PerturbationMode::VectorNoise { .. } => Ok(Prepared {
            blurred: None,
            side: 0,
        }),
        PerturbationMode::ImageBlur { grid, radius } => {
            let side = image_side(state.len(), grid)?;
            Ok(Prepared {
                blurred: Some(gaussian_blur(state, side, radius as f64)),
                side,
            })
        }
    }
}

fn perturb_prepared(
    state: &[f64],
    k: usize,
    spec: &PerturbationSpec,
    key: PerturbKey,
    prep: &Prepared,
) -> Vec<f64> {
    let mut out = state.to_vec();
    match spec.mode {
        PerturbationMode::VectorNoise { sigma } => {
            let mut rng = rng_for(&[spec.seed, key.traj, key.t, k as u64]);
            let z: f64 = StandardNormal.sample(&mut rng);
            out[k] += sigma * z;
        }
        PerturbationMode::ImageBlur { grid, .. } => {
            let blurred = prep.blurred.as_ref().expect("prepared blur");
            let patch = prep.side / grid;
            let (pr, pc) = (k / grid, k % grid);
            for r in pr * patch..(pr + 1) * patch {
                for c in pc * patch..(pc + 1) * patch {
                    out[r * prep.side + c] = blurred[r * prep.side + c];
                }
            }
        }
    }
    out
}

/// `phi(s, k)`: the state with only position (or patch) `k` perturbed.
pub fn perturb(state: &[f64], k: usize, spec: &PerturbationSpec, key: PerturbKey) -> Result<Vec<f64>> {
    let n = spec.positions(state.len())?;
    if k >= n {
        return Err(Error::usage(format!("position {k} out of range 0..{n}")));
    }
    let prep = prepare(state, spec)?;
    Ok(perturb_prepared(state, k, spec, key, &prep))
}

fn half_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

/// `S(s, k) = 0.5 * ||pi(s) - pi(phi(s, k))||^2`.
pub fn saliency_score<P: Policy + ?Sized>(
    policy: &P,
    state: &[f64],
    k: usize,
    spec: &PerturbationSpec,
    key: PerturbKey,
) -> Result<f64> {
    let base = policy.act(state)?;
    let moved = policy.act(&perturb(state, k, spec, key)?)?;
    Ok(half_sq_dist(&base, &moved))
}

/// Saliency at every position of `state`.
pub fn saliency_map<P: Policy + ?Sized>(
    policy: &P,
    state: &[f64],
    spec: &PerturbationSpec,
    key: PerturbKey,
) -> Result<Vec<f64>> {
    let n = spec.positions(state.len())?;
    let prep = prepare(state, spec)?;
    let base = policy.act(state)?;
    (0..n)
        .map(|k| {
            let moved = policy.act(&perturb_prepared(state, k, spec, key, &prep))?;
            Ok(half_sq_dist(&base, &moved))
        })
        .collect()
}

/// Mean saliency over all positions.
pub fn sis<P: Policy + ?Sized>(
    policy: &P,
    state: &[f64],
    spec: &PerturbationSpec,
    key: PerturbKey,
) -> Result<f64> {
    let map = saliency_map(policy, state, spec, key)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SisConfig {
    pub perturbation: PerturbationSpec,
    pub frame_stride: usize,
    pub top_p: f64,
    pub beta: f64,
}

/// SIS value per trajectory and timestep, with the global threshold and the
/// resulting flags.
#[derive(Debug, Clone, PartialEq)]
pub struct SisTable {
    pub config: SisConfig,
    pub values: Vec<Vec<f64>>,
    pub threshold: f64,
    pub flags: Vec<Vec<bool>>,
    /// Number of timesteps scored directly, per trajectory.
    pub computed: Vec<usize>,
}

impl SisTable {
    pub fn total(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn flagged(&self) -> usize {
        self.flags.iter().flatten().filter(|f| **f).count()
    }

    pub fn flag(&self, traj: usize, t: usize) -> Option<bool> {
        self.flags.get(traj).and_then(|f| f.get(t)).copied()
    }
}

/// SIS for the whole dataset, scored at `t = 0, k, 2k, ...` with intermediate
/// timesteps reusing the latest score. Thresholded at [`DEFAULT_TOP_P`].
pub fn compute_sis_table<P: Policy + ?Sized>(
    policy: &P,
    dataset: &ExpertDataset,
    spec: &PerturbationSpec,
    frame_stride: usize,
) -> Result<SisTable> {
    if dataset.trajectories.is_empty() {
        return Err(Error::usage("cannot score an empty dataset"));
    }
    if frame_stride == 0 {
        return Err(Error::usage("frame stride must be >= 1"));
    }
    spec.validate()?;
    let rows: Vec<Result<(Vec<f64>, usize)>> = dataset
        .trajectories
        .par_iter()
        .enumerate()
        .map(|(i, tr)| {
            let mut values = Vec::with_capacity(tr.len());
            let mut computed = 0;
            let mut last = 0.0;
            for t in 0..tr.len() {
                if t % frame_stride == 0 {
                    let key = PerturbKey {
                        traj: i as u64,
                        t: t as u64,
                    };
                    last = sis(policy, tr.state(t), spec, key)?;
                    computed += 1;
                }
                values.push(last);
            }
            Ok((values, computed))
        })
        .collect();
    let mut values = Vec::with_capacity(rows.len());
    let mut computed = Vec::with_capacity(rows.len());
    for r in rows {
        let (v, c) = r?;
        values.push(v);
        computed.push(c);
    }
    let mut table = SisTable {
        config: SisConfig {
            perturbation: *spec,
            frame_stride,
            top_p: DEFAULT_TOP_P,
            beta: crate::training::DEFAULT_BETA,
        },
        flags: Vec::new(),
        values,
        threshold: 0.0,
        computed,
    };
    threshold(&mut table, DEFAULT_TOP_P)?;
    Ok(table)
}

/// Linear-interpolation quantile `q` of `values`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Sets `T` to the `(1 - p)` quantile of all SIS values and flags
/// every timestep with `SIS > T`.
pub fn threshold(table: &mut SisTable, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::usage(format!("top-p must lie in (0, 1), got {p}")));
    }
    let all: Vec<f64> = table.values.iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(Error::usage("empty SIS table"));
    }
    let t = quantile(&all, 1.0 - p);
    table.threshold = t;
    table.config.top_p = p;
    table.flags = table
        .values
        .iter()
        .map(|row| row.iter().map(|v| *v > t).collect())
        .collect();
    Ok(t)
}
