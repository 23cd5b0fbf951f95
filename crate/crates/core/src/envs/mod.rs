//! Episodic simulators for the three evaluation tasks.
//!
//! Each environment exposes a misspecified reward (`RewardVariant::EnvMisspecified`)
//! used for training and a held-out true reward used only by evaluation.

pub mod gridworld;
pub mod highway;
pub mod inventory;

pub use gridworld::{GridWorld, Orientation, FORWARD, GRID_SIZE, TURN};
pub use highway::{lane_of, Highway, HighwayAction, EGO_Y, LANE_COUNT, LANE_WIDTH};
pub use inventory::{Inventory, DEMAND_MEAN, MAX_STOCK};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ItersError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    GridWorld,
    Highway,
    Inventory,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::GridWorld, EnvKind::Highway, EnvKind::Inventory];

    pub fn state_dim(self) -> usize {
        self.feature_specs().len()
    }

    pub fn n_actions(self) -> usize {
        match self {
            EnvKind::GridWorld => 2,
            EnvKind::Highway => 5,
            EnvKind::Inventory => 7,
        }
    }

    /// Maximum episode length.
    pub fn horizon(self) -> usize {
        match self {
            EnvKind::GridWorld => gridworld::HORIZON,
            EnvKind::Highway => highway::HORIZON,
            EnvKind::Inventory => inventory::HORIZON,
        }
    }

    pub fn feature_specs(self) -> &'static [FeatureSpec] {
        match self {
            EnvKind::GridWorld => &gridworld::FEATURES,
            EnvKind::Highway => &highway::FEATURES,
            EnvKind::Inventory => &inventory::FEATURES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::GridWorld => "gridworld",
            EnvKind::Highway => "highway",
            EnvKind::Inventory => "inventory",
        }
    }

    /// Draws a state uniformly from the valid per-feature ranges.
    pub fn random_state(self, rng: &mut Rng) -> State {
        State::new(
            self.feature_specs()
                .iter()
                .map(|spec| spec.sample(rng))
                .collect(),
        )
    }

    pub fn random_action(self, rng: &mut Rng) -> Action {
        Action(rng.random_range(0..self.n_actions()))
    }

    pub fn check_action(self, action: Action) -> Result<()> {
        if action.0 < self.n_actions() {
            Ok(())
        } else {
            Err(ItersError::domain(format!(
                "action index {} out of range for {} (|A| = {})",
                action.0,
                self.name(),
                self.n_actions()
            )))
        }
    }
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EnvKind {
    type Err = ItersError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gridworld" | "grid" => Ok(EnvKind::GridWorld),
            "highway" => Ok(EnvKind::Highway),
            "inventory" => Ok(EnvKind::Inventory),
            other => Err(ItersError::config("env", format!("unknown environment `{other}`"))),
        }
    }
}

/// Valid range of one state feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureSpec {
    pub name: &'static str,
    pub lo: f32,
    pub hi: f32,
    /// Integer-valued features are copied exactly during augmentation and
    /// normalized by their range; continuous ones are already normalized.
    pub discrete: bool,
}

impl FeatureSpec {
    pub const fn discrete(name: &'static str, lo: f32, hi: f32) -> Self {
        Self { name, lo, hi, discrete: true }
    }

    pub const fn continuous(name: &'static str, lo: f32, hi: f32) -> Self {
        Self { name, lo, hi, discrete: false }
    }

    pub fn sample(&self, rng: &mut Rng) -> f32 {
        if self.discrete {
            rng.random_range(self.lo as i64..=self.hi as i64) as f32
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    /// Maps a raw feature value into network input scale.
    pub fn normalize(&self, value: f32) -> f32 {
        if self.discrete {
            (value - self.lo) / (self.hi - self.lo)
        } else {
            value
        }
    }

    pub fn denormalize(&self, value: f32) -> f32 {
        if self.discrete {
            (value * (self.hi - self.lo) + self.lo).round()
        } else {
            value
        }
    }

    pub fn clamp(&self, value: f32) -> f32 {
        value.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, value: f32) -> bool {
        value >= self.lo && value <= self.hi && (!self.discrete || value.fract() == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub features: Vec<f32>,
}

impl State {
    pub fn new(features: Vec<f32>) -> Self {
        Self { features }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardVariant {
    EnvMisspecified,
    True,
}

/// Environment-specific facts about one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepInfo {
    GridWorld {
        moved: bool,
        turned: bool,
        reached_goal: bool,
    },
    Highway {
        crashed: bool,
        lane_changed: bool,
        /// Ego speed after the action, m/s.
        speed: f32,
    },
    Inventory {
        order: u32,
        demand: u32,
        sold: u32,
        shortage: u32,
    },
}

impl StepInfo {
    pub fn kind(&self) -> EnvKind {
        match self {
            StepInfo::GridWorld { .. } => EnvKind::GridWorld,
            StepInfo::Highway { .. } => EnvKind::Highway,
            StepInfo::Inventory { .. } => EnvKind::Inventory,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: State,
    pub action: Action,
    pub next_state: State,
    /// Episode finished (terminal or horizon reached).
    pub done: bool,
    /// Episode ended by the task itself (goal, crash), not by the horizon.
    pub terminal: bool,
    pub info: StepInfo,
}

/// Per-step reward for `variant` on a transition produced by `kind`.
pub fn reward(kind: EnvKind, variant: RewardVariant, t: &Transition) -> Result<f32> {
    if t.info.kind() != kind {
        return Err(ItersError::domain(format!(
            "transition from {} scored with {} reward",
            t.info.kind(),
            kind
        )));
    }
    Ok(match t.info {
        StepInfo::GridWorld {
            moved: _,
            turned,
            reached_goal,
        } => {
            let forward = !turned;
            let mut r = 0.0;
            if forward {
                r -= 1.0;
            }
            if reached_goal {
                r += 1.0;
            }
            if variant == RewardVariant::True && turned {
                r -= 1.0;
            }
            r
        }
        StepInfo::Highway {
            crashed,
            lane_changed,
            speed,
        } => {
            let mut r = if crashed {
                -1.0
            } else {
                0.5 * (speed - highway::SPEEDS[0]) / 10.0 + 0.5
            };
            if variant == RewardVariant::True && lane_changed {
                r -= highway::LANE_CHANGE_COST;
            }
            r
        }
        StepInfo::Inventory {
            order,
            demand: _,
            sold,
            shortage,
        } => {
            let mut r = inventory::SELL_PRICE * sold as f32
                - inventory::BUY_PRICE * order as f32
                - inventory::SHORTAGE_COST * shortage as f32;
            if variant == RewardVariant::True && order > 0 {
                r -= inventory::DELIVERY_COST;
            }
            r
        }
    })
}

/// A live environment instance of any kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Env {
    GridWorld(GridWorld),
    Highway(Highway),
    Inventory(Inventory),
}

impl Env {
    pub fn new(kind: EnvKind) -> Self {
        match kind {
            EnvKind::GridWorld => Env::GridWorld(GridWorld::default()),
            EnvKind::Highway => Env::Highway(Highway::default()),
            EnvKind::Inventory => Env::Inventory(Inventory::default()),
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            Env::GridWorld(_) => EnvKind::GridWorld,
            Env::Highway(_) => EnvKind::Highway,
            Env::Inventory(_) => EnvKind::Inventory,
        }
    }

    pub fn reset(&mut self, rng: &mut Rng) -> State {
        match self {
            Env::GridWorld(env) => env.reset(rng),
            Env::Highway(env) => env.reset(rng),
            Env::Inventory(env) => env.reset(),
        }
    }

    pub fn step(&mut self, action: Action, rng: &mut Rng) -> Result<Transition> {
        match self {
            Env::GridWorld(env) => env.step(action),
            Env::Highway(env) => env.step(action),
            Env::Inventory(env) => env.step(action, rng),
        }
    }

    pub fn observe(&self) -> State {
        match self {
            Env::GridWorld(env) => env.observe(),
            Env::Highway(env) => env.observe(),
            Env::Inventory(env) => env.observe(),
        }
    }
}
