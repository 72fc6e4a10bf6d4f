//! Planar pick-and-place: drive the gripper to the object, close on it while
//! nearly still, carry it to the target and open while nearly still.
//!
//! A close or open attempted near its goal (object or target) but outside
//! tolerance knocks the object over and ends the episode as a failure. Far
//! from the goal a close grabs nothing and an open drops the object where
//! the gripper is.

use rand::Rng;

use super::render;
use super::{Environment, ObsMode, Outcome, Step};
use crate::rng::rng_for;

pub const EPS_GRASP: f64 = 0.02;
pub const EPS_DROP: f64 = 0.02;
/// Largest per-axis displacement per step.
pub const MAX_MOVE: f64 = 0.05;
/// Largest displacement norm during which a close/open still takes hold.
pub const STILL_TOL: f64 = 0.008;
/// Distance from the goal within which a botched close/open is fatal.
pub const INTERACTION_RADIUS: f64 = 0.05;
pub const MIN_SEPARATION: f64 = 0.3;
pub const EPISODE_CAP: usize = 200;
const SPAWN_MARGIN: f64 = 0.1;
/// Expert issues close/open once within this distance.
const EXPERT_RADIUS: f64 = EPS_GRASP / 2.0;

pub const VECTOR_OBS_DIM: usize = 11;
pub const ACTION_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PickPlaceState {
    pub gripper: [f64; 2],
    pub object: [f64; 2],
    pub target: [f64; 2],
    pub holding: bool,
    pub step: usize,
    pub outcome: Outcome,
}

/// Physical action. The policy-facing vector is `[dx / MAX_MOVE, dy / MAX_MOVE, grasp]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PickPlaceAction {
    pub dx: f64,
    pub dy: f64,
    /// `>= 0.5` closes, `<= -0.5` opens, anything else holds.
    pub grasp: f64,
}

impl PickPlaceAction {
    pub fn from_vector(v: &[f64]) -> Self {
        let get = |i: usize| v.get(i).copied().filter(|x| x.is_finite()).unwrap_or(0.0);
        Self {
            dx: (get(0) * MAX_MOVE).clamp(-MAX_MOVE, MAX_MOVE),
            dy: (get(1) * MAX_MOVE).clamp(-MAX_MOVE, MAX_MOVE),
            grasp: get(2).clamp(-1.0, 1.0),
        }
    }

    pub fn to_vector(self) -> Vec<f64> {
        vec![self.dx / MAX_MOVE, self.dy / MAX_MOVE, self.grasp]
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PickPlace;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl PickPlace {
    pub fn apply(&self, state: &PickPlaceState, a: PickPlaceAction) -> Step<PickPlaceState> {
        let mut s = state.clone();
        if s.outcome != Outcome::Running {
            return Step::<PickPlaceState>::from_state(s);
        }
        s.step += 1;
        let prev = s.gripper;
        s.gripper = [
            (prev[0] + a.dx).clamp(0.0, 1.0),
            (prev[1] + a.dy).clamp(0.0, 1.0),
        ];
        let moved = dist(prev, s.gripper);
        if s.holding {
            s.object = s.gripper;
        }
        if a.grasp >= 0.5 && !s.holding {
            let d = dist(s.gripper, s.object);
            if d <= EPS_GRASP && moved <= STILL_TOL {
                s.holding = true;
                s.object = s.gripper;
            } else if d <= INTERACTION_RADIUS {
                s.outcome = Outcome::Failure;
            }
        } else if a.grasp <= -0.5 && s.holding {
            s.holding = false;
            let d = dist(s.gripper, s.target);
            if d <= EPS_DROP && moved <= STILL_TOL {
                s.outcome = Outcome::Success;
            } else if d <= INTERACTION_RADIUS {
                s.outcome = Outcome::Failure;
            }
        }
        if s.outcome == Outcome::Running && s.step >= EPISODE_CAP {
            s.outcome = Outcome::Failure;
        }
        Step::<PickPlaceState>::from_state(s)
    }

    pub fn render(&self, s: &PickPlaceState) -> Vec<f64> {
        render::render(&[
            (s.target[0], s.target[1], 0.4),
            (s.object[0], s.object[1], 0.7),
            (s.gripper[0], s.gripper[1], 1.0),
        ])
    }
}

impl Environment for PickPlace {
    type State = PickPlaceState;

    fn reset(&self, seed: u64) -> PickPlaceState {
        let mut rng = rng_for(&[0x5049_434B, seed]);
        let mut sample = || {
            [
                rng.random_range(SPAWN_MARGIN..1.0 - SPAWN_MARGIN),
                rng.random_range(SPAWN_MARGIN..1.0 - SPAWN_MARGIN),
            ]
        };
        let (object, target) = loop {
            let o = sample();
            let t = sample();
            if dist(o, t) >= MIN_SEPARATION {
                break (o, t);
            }
        };
        PickPlaceState {
            gripper: [0.5, 0.5],
            object,
            target,
            holding: false,
            step: 0,
            outcome: Outcome::Running,
        }
    }

    fn step(&self, state: &PickPlaceState, action: &[f64]) -> Step<PickPlaceState> {
        self.apply(state, PickPlaceAction::from_vector(action))
    }

    fn observe(&self, s: &PickPlaceState, mode: ObsMode) -> Vec<f64> {
        match mode {
            ObsMode::Vector => {
                let rel = [
                    s.object[0] - s.gripper[0],
                    s.object[1] - s.gripper[1],
                    s.target[0] - s.gripper[0],
                    s.target[1] - s.gripper[1],
                ];
                let mut v = vec![s.gripper[0], s.gripper[1]];
                v.extend(rel);
                v.push(if s.holding { 1.0 } else { 0.0 });
                // Offsets in units of one full step, saturated.
                v.extend(rel.iter().map(|r| (r / MAX_MOVE).clamp(-1.0, 1.0)));
                v
            }
            ObsMode::Image32 => self.render(s),
        }
    }

    fn expert_action(&self, s: &PickPlaceState) -> Vec<f64> {
        let (goal, cmd) = if s.holding {
            (s.target, -1.0)
        } else {
            (s.object, 1.0)
        };
        let d = [goal[0] - s.gripper[0], goal[1] - s.gripper[1]];
        let a = if (d[0] * d[0] + d[1] * d[1]).sqrt() <= EXPERT_RADIUS {
            PickPlaceAction {
                dx: 0.0,
                dy: 0.0,
                grasp: cmd,
            }
        } else {
            PickPlaceAction {
                dx: d[0].clamp(-MAX_MOVE, MAX_MOVE),
                dy: d[1].clamp(-MAX_MOVE, MAX_MOVE),
                grasp: 0.0,
            }
        };
        a.to_vector()
    }

    fn is_critical(&self, s: &PickPlaceState) -> bool {
        self.expert_action(s)[2].abs() >= 0.5
    }

    fn max_steps(&self) -> usize {
        EPISODE_CAP
    }

    fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    fn obs_dim(&self, mode: ObsMode) -> usize {
        match mode {
            ObsMode::Vector => VECTOR_OBS_DIM,
            ObsMode::Image32 => render::SIDE * render::SIDE,
        }
    }

    fn supports(&self, _mode: ObsMode) -> bool {
        true
    }

    fn outcome(&self, s: &PickPlaceState) -> Outcome {
        s.outcome
    }
}
