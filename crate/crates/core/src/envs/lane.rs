//! Lateral lane keeping through three narrow gates. At each gate step the
//! vehicle must be within the gate half-width and travelling straight.

use rand::Rng;

use super::{Environment, ObsMode, Outcome, Step};
use crate::rng::rng_for;

pub const EPISODE_STEPS: usize = 300;
pub const GATE_STEPS: [usize; 3] = [99, 199, 299];
pub const GATE_HALF_WIDTH: f64 = 0.03;
/// Largest lateral displacement per step.
pub const MAX_LATERAL: f64 = 0.05;
/// Largest heading (lateral displacement of the last step) allowed in a gate.
pub const HEADING_TOL: f64 = 0.005;
/// Inside this lateral error the expert switches to fine corrections.
const FINE_ZONE: f64 = 0.03;
const FINE_MAX: f64 = 0.004;

pub const OBS_DIM: usize = 4;
pub const ACTION_DIM: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LaneState {
    pub lateral: f64,
    pub heading: f64,
    pub step: usize,
    pub centers: [f64; 3],
    pub next_gate: usize,
    pub outcome: Outcome,
}

impl LaneState {
    fn gate_center(&self) -> f64 {
        self.centers[self.next_gate.min(2)]
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Lane;

impl Environment for Lane {
    type State = LaneState;

    fn reset(&self, seed: u64) -> LaneState {
        let mut rng = rng_for(&[0x4C41_4E45, seed]);
        let centers = [
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
        ];
        LaneState {
            lateral: 0.5,
            heading: 0.0,
            step: 0,
            centers,
            next_gate: 0,
            outcome: Outcome::Running,
        }
    }

    fn step(&self, state: &LaneState, action: &[f64]) -> Step<LaneState> {
        let mut s = state.clone();
        if s.outcome != Outcome::Running {
            return Step::<LaneState>::from_state(s);
        }
        let u = action
            .first()
            .copied()
            .filter(|v| v.is_finite())
            .unwrap_or(0.0)
            * MAX_LATERAL;
        let u = u.clamp(-MAX_LATERAL, MAX_LATERAL);
        let before = s.lateral;
        s.lateral = (s.lateral + u).clamp(0.0, 1.0);
        s.heading = s.lateral - before;
        let t = s.step;
        s.step += 1;
        if s.next_gate < 3 && t == GATE_STEPS[s.next_gate] {
            let c = s.centers[s.next_gate];
            let inside = (s.lateral - c).abs() <= GATE_HALF_WIDTH;
            let straight = s.heading.abs() <= HEADING_TOL;
            if inside && straight {
                s.next_gate += 1;
                if s.next_gate == 3 {
                    s.outcome = Outcome::Success;
                }
            } else {
                s.outcome = Outcome::Failure;
            }
        }
        if s.outcome == Outcome::Running && s.step >= EPISODE_STEPS {
            s.outcome = Outcome::Failure;
        }
        Step::<LaneState>::from_state(s)
    }

    /// `[lateral error, heading, distance to upper edge, distance to lower edge]`,
    /// heading in units of the maximum lateral step.
    fn observe(&self, s: &LaneState, _mode: ObsMode) -> Vec<f64> {
        let c = s.gate_center();
        vec![
            s.lateral - c,
            s.heading / MAX_LATERAL,
            c + GATE_HALF_WIDTH - s.lateral,
            s.lateral - (c - GATE_HALF_WIDTH),
        ]
    }

    fn expert_action(&self, s: &LaneState) -> Vec<f64> {
        let e = s.gate_center() - s.lateral;
        let u = if e.abs() > FINE_ZONE {
            e.clamp(-MAX_LATERAL, MAX_LATERAL)
        } else {
            e.clamp(-FINE_MAX, FINE_MAX)
        };
        vec![u / MAX_LATERAL]
    }

    fn is_critical(&self, s: &LaneState) -> bool {
        GATE_STEPS.contains(&s.step)
    }

    fn max_steps(&self) -> usize {
        EPISODE_STEPS
    }

    fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    fn obs_dim(&self, _mode: ObsMode) -> usize {
        OBS_DIM
    }

    fn supports(&self, mode: ObsMode) -> bool {
        mode == ObsMode::Vector
    }

    fn outcome(&self, s: &LaneState) -> Outcome {
        s.outcome
    }
}
