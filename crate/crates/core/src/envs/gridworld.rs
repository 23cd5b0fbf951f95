//! 5×5 navigation task. The agent can step forward or turn 90° clockwise.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Action, EnvKind, FeatureSpec, State, StepInfo, Transition};
use crate::error::{ItersError, Result};
use crate::rng::Rng;

pub const GRID_SIZE: i32 = 5;
pub(crate) const HORIZON: usize = 30;

pub const FORWARD: Action = Action(0);
pub const TURN: Action = Action(1);

pub(crate) static FEATURES: [FeatureSpec; 5] = [
    FeatureSpec::discrete("agent_x", 0.0, 4.0),
    FeatureSpec::discrete("agent_y", 0.0, 4.0),
    FeatureSpec::discrete("goal_x", 0.0, 4.0),
    FeatureSpec::discrete("goal_y", 0.0, 4.0),
    FeatureSpec::discrete("orientation", 0.0, 3.0),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    North = 0,
    East = 1,
    South = 2,
    West = 3,
}

impl Orientation {
    pub fn from_index(i: usize) -> Self {
        match i % 4 {
            0 => Orientation::North,
            1 => Orientation::East,
            2 => Orientation::South,
            _ => Orientation::West,
        }
    }

    pub fn clockwise(self) -> Self {
        Self::from_index(self as usize + 1)
    }

    fn delta(self) -> (i32, i32) {
        match self {
            Orientation::North => (0, 1),
            Orientation::East => (1, 0),
            Orientation::South => (0, -1),
            Orientation::West => (-1, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridWorld {
    pub pos: (i32, i32),
    pub goal: (i32, i32),
    pub facing: Orientation,
    pub steps: usize,
    pub done: bool,
}

impl Default for GridWorld {
    fn default() -> Self {
        Self {
            pos: (0, 0),
            goal: (GRID_SIZE - 1, GRID_SIZE - 1),
            facing: Orientation::North,
            steps: 0,
            done: false,
        }
    }
}

impl GridWorld {
    /// Builds an environment at a given pose, mainly for tests and replays.
    pub fn at(pos: (i32, i32), facing: Orientation, goal: (i32, i32)) -> Self {
        Self {
            pos,
            goal,
            facing,
            steps: 0,
            done: false,
        }
    }

    pub fn reset(&mut self, rng: &mut Rng) -> State {
        let cells = (GRID_SIZE * GRID_SIZE) as usize;
        let agent = rng.random_range(0..cells);
        // goal uniform over the remaining cells
        let mut goal = rng.random_range(0..cells - 1);
        if goal >= agent {
            goal += 1;
        }
        let cell = |i: usize| ((i as i32) % GRID_SIZE, (i as i32) / GRID_SIZE);
        self.pos = cell(agent);
        self.goal = cell(goal);
        self.facing = Orientation::from_index(rng.random_range(0..4));
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    pub fn observe(&self) -> State {
        State::new(vec![
            self.pos.0 as f32,
            self.pos.1 as f32,
            self.goal.0 as f32,
            self.goal.1 as f32,
            self.facing as usize as f32,
        ])
    }

    pub fn step(&mut self, action: Action) -> Result<Transition> {
        EnvKind::GridWorld.check_action(action)?;
        if self.done {
            return Err(ItersError::domain("gridworld episode already finished"));
        }
        let state = self.observe();
        let (moved, turned) = if action == FORWARD {
            let (dx, dy) = self.facing.delta();
            let next = (self.pos.0 + dx, self.pos.1 + dy);
            let inside = (0..GRID_SIZE).contains(&next.0) && (0..GRID_SIZE).contains(&next.1);
            if inside {
                self.pos = next;
            }
            (inside, false)
        } else {
            self.facing = self.facing.clockwise();
            (false, true)
        };
        self.steps += 1;
        let reached_goal = self.pos == self.goal;
        self.done = reached_goal || self.steps >= HORIZON;
        Ok(Transition {
            state,
            action,
            next_state: self.observe(),
            done: self.done,
            terminal: reached_goal,
            info: StepInfo::GridWorld {
                moved,
                turned,
                reached_goal,
            },
        })
    }
}

/// Pose (x, y, orientation) encoded in a GridWorld state.
pub fn pose(state: &State) -> (i32, i32, i32) {
    (
        state.features[0] as i32,
        state.features[1] as i32,
        state.features[4] as i32,
    )
}
