//! Deterministic toy control tasks with scripted experts and expert dataset
//! generation.
//!
//! Policies see normalised action vectors; each environment clips and scales
//! them to its physical ranges. Stored observations and actions are rounded
//! to `f32` before use so that datasets written to disk replay exactly.

pub mod lane;
pub mod pickplace;
pub mod render;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::mix_seed;

pub use lane::{Lane, LaneState};
pub use pickplace::{PickPlace, PickPlaceAction, PickPlaceState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Running,
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step<S> {
    pub state: S,
    pub success: bool,
    pub done: bool,
}

impl<S> Step<S> {
    pub(crate) fn from_state_outcome(state: S, outcome: Outcome) -> Self {
        Self {
            state,
            success: outcome == Outcome::Success,
            done: outcome != Outcome::Running,
        }
    }
}

impl Step<PickPlaceState> {
    fn from_state(s: PickPlaceState) -> Self {
        let o = s.outcome;
        Self::from_state_outcome(s, o)
    }
}

impl Step<LaneState> {
    fn from_state(s: LaneState) -> Self {
        let o = s.outcome;
        Self::from_state_outcome(s, o)
    }
}

pub trait Environment: Sync {
    type State: Clone + Send + Sync;

    fn reset(&self, seed: u64) -> Self::State;
    fn step(&self, state: &Self::State, action: &[f64]) -> Step<Self::State>;
    fn observe(&self, state: &Self::State, mode: ObsMode) -> Vec<f64>;
    /// Scripted expert action (normalised vector).
    fn expert_action(&self, state: &Self::State) -> Vec<f64>;
    /// True where a small action error decides the episode: grasp/release for
    /// pick-and-place, gate passage for the lane task.
    fn is_critical(&self, state: &Self::State) -> bool;
    fn max_steps(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn obs_dim(&self, mode: ObsMode) -> usize;
    fn supports(&self, mode: ObsMode) -> bool;
    fn outcome(&self, state: &Self::State) -> Outcome;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvId {
    #[serde(alias = "pick-place")]
    Pickplace,
    Lane,
}

impl EnvId {
    pub fn tag(self) -> u8 {
        match self {
            EnvId::Pickplace => 0,
            EnvId::Lane => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(EnvId::Pickplace),
            1 => Ok(EnvId::Lane),
            t => Err(Error::format(format!("unknown env tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvId::Pickplace => "pickplace",
            EnvId::Lane => "lane",
        }
    }
}

impl std::str::FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pickplace" | "pick-place" => Ok(EnvId::Pickplace),
            "lane" => Ok(EnvId::Lane),
            _ => Err(Error::usage(format!("unknown env '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObsMode {
    Vector,
    Image32,
}

impl ObsMode {
    pub fn tag(self) -> u8 {
        match self {
            ObsMode::Vector => 0,
            ObsMode::Image32 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ObsMode::Vector),
            1 => Ok(ObsMode::Image32),
            t => Err(Error::format(format!("unknown observation mode tag {t}"))),
        }
    }
}

impl std::str::FromStr for ObsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vector" => Ok(ObsMode::Vector),
            "image32" => Ok(ObsMode::Image32),
            _ => Err(Error::usage(format!("unknown observation mode '{s}'"))),
        }
    }
}

/// One episode as flat row-major state and action buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub episode_seed: u64,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub success: bool,
}

impl Trajectory {
    pub fn new(episode_seed: u64, state_dim: usize, action_dim: usize) -> Self {
        Self {
            episode_seed,
            state_dim,
            action_dim,
            states: Vec::new(),
            actions: Vec::new(),
            success: false,
        }
    }

    pub fn len(&self) -> usize {
        if self.state_dim == 0 {
            0
        } else {
            self.states.len() / self.state_dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn push(&mut self, state: &[f64], action: &[f64]) {
        self.states.extend_from_slice(state);
        self.actions.extend_from_slice(action);
    }
}

/// Successful expert demonstrations for one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertDataset {
    pub env: EnvId,
    pub obs_mode: ObsMode,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

impl ExpertDataset {
    pub fn state_dim(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.state_dim)
    }

    pub fn action_dim(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.action_dim)
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// `(trajectory, timestep)` of every stored pair, in order.
    pub fn index(&self) -> Vec<(usize, usize)> {
        self.trajectories
            .iter()
            .enumerate()
            .flat_map(|(i, tr)| (0..tr.len()).map(move |t| (i, t)))
            .collect()
    }

    /// Per-trajectory mask of mission-critical timesteps.
    pub fn critical_mask(&self) -> Vec<Vec<bool>> {
        self.trajectories
            .iter()
            .map(|tr| critical_steps(self.env, tr))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(Error::usage("dataset has no trajectories"));
        }
        let (sd, ad) = (self.state_dim(), self.action_dim());
        for tr in &self.trajectories {
            if tr.is_empty() || tr.state_dim != sd || tr.action_dim != ad {
                return Err(Error::format("inconsistent trajectory shapes"));
            }
            if tr.actions.len() != tr.len() * ad || tr.states.len() % sd != 0 {
                return Err(Error::format("trajectory buffers have the wrong length"));
            }
        }
        Ok(())
    }
}

/// Grasp/release steps (expert grasp command) for pick-and-place, gate steps
/// for the lane task.
pub fn critical_steps(env: EnvId, tr: &Trajectory) -> Vec<bool> {
    match env {
        EnvId::Pickplace => (0..tr.len()).map(|t| tr.action(t)[2].abs() >= 0.5).collect(),
        EnvId::Lane => (0..tr.len()).map(|t| lane::GATE_STEPS.contains(&t)).collect(),
    }
}

#[inline]
pub(crate) fn round_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| *x as f32 as f64).collect()
}

/// Runs the scripted expert for one episode.
pub fn expert_episode<E: Environment>(env: &E, mode: ObsMode, episode_seed: u64) -> Trajectory {
    let mut tr = Trajectory::new(episode_seed, env.obs_dim(mode), env.action_dim());
    let mut state = env.reset(episode_seed);
    for _ in 0..env.max_steps() {
        let obs = round_f32(&env.observe(&state, mode));
        let action = round_f32(&env.expert_action(&state));
        tr.push(&obs, &action);
        let step = env.step(&state, &action);
        state = step.state;
        if step.done {
            tr.success = step.success;
            break;
        }
    }
    tr
}

fn generate_with<E: Environment>(
    env: &E,
    id: EnvId,
    mode: ObsMode,
    episodes: usize,
    seed: u64,
) -> Result<ExpertDataset> {
    if episodes == 0 {
        return Err(Error::usage("need at least one episode"));
    }
    if !env.supports(mode) {
        return Err(Error::usage(format!("{} does not support this observation mode", id.name())));
    }
    let mut trajectories = Vec::with_capacity(episodes);
    let max_attempts = episodes as u64 * 20 + 100;
    let mut attempt = 0u64;
    while trajectories.len() < episodes {
        if attempt >= max_attempts {
            return Err(Error::numeric("expert failed too often to fill the dataset"));
        }
        let ep_seed = mix_seed(&[seed, attempt]);
        attempt += 1;
        let tr = expert_episode(env, mode, ep_seed);
        if tr.success {
            trajectories.push(tr);
        }
    }
    Ok(ExpertDataset {
        env: id,
        obs_mode: mode,
        seed,
        trajectories,
    })
}

/// `episodes` successful expert trajectories; failed episodes are skipped.
pub fn generate_dataset(env: EnvId, mode: ObsMode, episodes: usize, seed: u64) -> Result<ExpertDataset> {
    match env {
        EnvId::Pickplace => generate_with(&PickPlace, env, mode, episodes, seed),
        EnvId::Lane => generate_with(&Lane, env, mode, episodes, seed),
    }
}

/// Replays the stored actions from the episode seed and checks that every
/// stored observation is reproduced bit for bit.
pub fn replay_matches(ds: &ExpertDataset, traj: usize) -> bool {
    fn run<E: Environment>(env: &E, mode: ObsMode, tr: &Trajectory) -> bool {
        let mut state = env.reset(tr.episode_seed);
        for t in 0..tr.len() {
            if round_f32(&env.observe(&state, mode)) != tr.state(t) {
                return false;
            }
            state = env.step(&state, tr.action(t)).state;
        }
        env.outcome(&state) == if tr.success { Outcome::Success } else { Outcome::Failure }
    }
    let tr = &ds.trajectories[traj];
    match ds.env {
        EnvId::Pickplace => run(&PickPlace, ds.obs_mode, tr),
        EnvId::Lane => run(&Lane, ds.obs_mode, tr),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_and_replayable() {
        let a = generate_dataset(EnvId::Pickplace, ObsMode::Vector, 5, 7).unwrap();
        let b = generate_dataset(EnvId::Pickplace, ObsMode::Vector, 5, 7).unwrap();
        assert_eq!(a, b);
        for i in 0..5 {
            assert!(replay_matches(&a, i));
        }
        let mask = a.critical_mask();
        // Exactly one grasp and one release per successful episode.
        assert!(mask.iter().all(|m| m.iter().filter(|c| **c).count() == 2));
    }

    #[test]
    fn image_dataset_has_rasters() {
        let ds = generate_dataset(EnvId::Pickplace, ObsMode::Image32, 2, 1).unwrap();
        assert_eq!(ds.state_dim(), 1024);
        assert!(replay_matches(&ds, 1));
    }

    #[test]
    fn lane_rejects_image_mode() {
        assert!(generate_dataset(EnvId::Lane, ObsMode::Image32, 1, 0).is_err());
    }

    #[test]
    fn lane_dataset_passes_gates() {
        let ds = generate_dataset(EnvId::Lane, ObsMode::Vector, 3, 2).unwrap();
        for tr in &ds.trajectories {
            assert_eq!(tr.len(), lane::EPISODE_STEPS);
        }
    }
}
