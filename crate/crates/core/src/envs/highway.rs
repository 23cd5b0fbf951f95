//! Simplified kinematic 4-lane highway.
//!
//! Discrete speeds, instantaneous lane changes, 1 s steps and a 5 m
//! collision radius. Observations follow the usual kinematics layout:
//! five rows of (presence, x, y, vx, vy), ego first in absolute terms and
//! the four traffic vehicles relative to the ego, nearest first.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Action, EnvKind, FeatureSpec, State, StepInfo, Transition};
use crate::error::{ItersError, Result};
use crate::rng::Rng;

pub const LANE_COUNT: usize = 4;
pub const LANE_WIDTH: f32 = 4.0;
pub(crate) const HORIZON: usize = 40;
pub(crate) const SPEEDS: [f32; 3] = [20.0, 25.0, 30.0];
pub(crate) const LANE_CHANGE_COST: f32 = 0.3;
const TRAFFIC: usize = 4;
const COLLISION_RADIUS: f32 = 5.0;
const EGO_X_SCALE: f32 = 600.0;
const REL_X_SCALE: f32 = 100.0;
const Y_SCALE: f32 = LANE_WIDTH * (LANE_COUNT - 1) as f32;
const VX_SCALE: f32 = 30.0;
const VY_SCALE: f32 = LANE_WIDTH;

/// Index of the ego y feature in the observation vector.
pub const EGO_Y: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HighwayAction {
    LaneLeft = 0,
    Idle = 1,
    LaneRight = 2,
    Faster = 3,
    Slower = 4,
}

impl From<HighwayAction> for Action {
    fn from(a: HighwayAction) -> Self {
        Action(a as usize)
    }
}

const fn row(ego: bool) -> [FeatureSpec; 5] {
    if ego {
        [
            FeatureSpec::continuous("ego_presence", 0.0, 1.0),
            FeatureSpec::continuous("ego_x", -1.0, 1.0),
            FeatureSpec::continuous("ego_y", 0.0, 1.0),
            FeatureSpec::continuous("ego_vx", 2.0 / 3.0, 1.0),
            FeatureSpec::continuous("ego_vy", -1.0, 1.0),
        ]
    } else {
        [
            FeatureSpec::continuous("presence", 0.0, 1.0),
            FeatureSpec::continuous("rel_x", -1.0, 1.0),
            FeatureSpec::continuous("rel_y", -1.0, 1.0),
            FeatureSpec::continuous("rel_vx", -1.0, 1.0),
            FeatureSpec::continuous("rel_vy", -1.0, 1.0),
        ]
    }
}

const fn all_features() -> [FeatureSpec; 25] {
    let ego = row(true);
    let other = row(false);
    let mut out = [ego[0]; 25];
    let mut i = 0;
    while i < 25 {
        out[i] = if i < 5 { ego[i] } else { other[i % 5] };
        i += 1;
    }
    out
}

pub(crate) static FEATURES: [FeatureSpec; 25] = all_features();

/// Lane index recovered from a normalized ego y feature.
pub fn lane_of(y_norm: f32) -> i32 {
    (y_norm * Y_SCALE / LANE_WIDTH).round() as i32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub x: f32,
    pub lane: usize,
    pub speed: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Highway {
    pub ego: Vehicle,
    pub speed_level: usize,
    pub traffic: Vec<Vehicle>,
    /// Lateral velocity of the ego during the last step, m/s.
    pub ego_vy: f32,
    pub steps: usize,
    pub done: bool,
}

impl Default for Highway {
    fn default() -> Self {
        Self {
            ego: Vehicle {
                x: 0.0,
                lane: 1,
                speed: SPEEDS[1],
            },
            speed_level: 1,
            traffic: Vec::new(),
            ego_vy: 0.0,
            steps: 0,
            done: false,
        }
    }
}

impl Highway {
    /// Ego at x = 0 with the given lane and speed level plus explicit traffic.
    pub fn with_traffic(lane: usize, speed_level: usize, traffic: Vec<Vehicle>) -> Self {
        Self {
            ego: Vehicle {
                x: 0.0,
                lane,
                speed: SPEEDS[speed_level],
            },
            speed_level,
            traffic,
            ..Self::default()
        }
    }

    pub fn reset(&mut self, rng: &mut Rng) -> State {
        *self = Self::default();
        self.traffic = (0..TRAFFIC)
            .map(|_| Vehicle {
                x: rng.random_range(15.0..=80.0),
                lane: rng.random_range(0..LANE_COUNT),
                speed: rng.random_range(20.0..=25.0),
            })
            .collect();
        self.observe()
    }

    pub fn observe(&self) -> State {
        let mut f = Vec::with_capacity(25);
        let ego_y = self.ego.lane as f32 * LANE_WIDTH;
        f.extend_from_slice(&[
            1.0,
            (self.ego.x / EGO_X_SCALE - 1.0).clamp(-1.0, 1.0),
            ego_y / Y_SCALE,
            self.ego.speed / VX_SCALE,
            (self.ego_vy / VY_SCALE).clamp(-1.0, 1.0),
        ]);
        let mut others: Vec<&Vehicle> = self.traffic.iter().collect();
        others.sort_by(|a, b| {
            (a.x - self.ego.x)
                .abs()
                .total_cmp(&(b.x - self.ego.x).abs())
        });
        for v in others {
            f.extend_from_slice(&[
                1.0,
                ((v.x - self.ego.x) / REL_X_SCALE).clamp(-1.0, 1.0),
                (v.lane as f32 * LANE_WIDTH - ego_y) / Y_SCALE,
                ((v.speed - self.ego.speed) / VX_SCALE).clamp(-1.0, 1.0),
                (-self.ego_vy / VY_SCALE).clamp(-1.0, 1.0),
            ]);
        }
        f.resize(25, 0.0);
        State::new(f)
    }

    pub fn step(&mut self, action: Action) -> Result<Transition> {
        EnvKind::Highway.check_action(action)?;
        if self.done {
            return Err(ItersError::domain("highway episode already finished"));
        }
        let state = self.observe();
        let old_lane = self.ego.lane;
        match action.0 {
            0 => self.ego.lane = self.ego.lane.saturating_sub(1),
            2 => self.ego.lane = (self.ego.lane + 1).min(LANE_COUNT - 1),
            3 => self.speed_level = (self.speed_level + 1).min(SPEEDS.len() - 1),
            4 => self.speed_level = self.speed_level.saturating_sub(1),
            _ => {}
        }
        self.ego.speed = SPEEDS[self.speed_level];
        let lane_changed = self.ego.lane != old_lane;
        self.ego_vy = (self.ego.lane as f32 - old_lane as f32) * LANE_WIDTH;

        self.ego.x += self.ego.speed;
        for v in &mut self.traffic {
            v.x += v.speed;
        }
        let crashed = self
            .traffic
            .iter()
            .any(|v| v.lane == self.ego.lane && (v.x - self.ego.x).abs() < COLLISION_RADIUS);
        self.steps += 1;
        self.done = crashed || self.steps >= HORIZON;
        Ok(Transition {
            state,
            action,
            next_state: self.observe(),
            done: self.done,
            terminal: crashed,
            info: StepInfo::Highway {
                crashed,
                lane_changed,
                speed: self.ego.speed,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn far_traffic() -> Vec<Vehicle> {
        (0..4)
            .map(|i| Vehicle {
                x: 500.0 + 50.0 * i as f32,
                lane: i,
                speed: 20.0,
            })
            .collect()
    }

    #[test]
    fn lane_left_clamps_at_lane_zero() {
        let mut env = Highway::with_traffic(0, 1, far_traffic());
        let t = env.step(HighwayAction::LaneLeft.into()).unwrap();
        assert_eq!(env.ego.lane, 0);
        assert!(matches!(t.info, StepInfo::Highway { lane_changed: false, .. }));
    }

    #[test]
    fn lane_right_shifts_y_by_one_lane() {
        let mut env = Highway::with_traffic(1, 1, far_traffic());
        let t = env.step(HighwayAction::LaneRight.into()).unwrap();
        assert_eq!(env.ego.lane, 2);
        assert!(matches!(t.info, StepInfo::Highway { lane_changed: true, .. }));
        let dy = t.next_state.features[EGO_Y] - t.state.features[EGO_Y];
        assert!((dy - LANE_WIDTH / Y_SCALE).abs() < 1e-6);
        assert_eq!(lane_of(t.next_state.features[EGO_Y]), 2);
    }

    #[test]
    fn close_vehicle_in_lane_crashes() {
        // ego at 25 m/s; a 21 m/s car 8 m ahead ends 4 m ahead after one step
        let mut traffic = far_traffic();
        traffic[0] = Vehicle {
            x: 8.0,
            lane: 1,
            speed: 21.0,
        };
        let mut env = Highway::with_traffic(1, 1, traffic);
        let t = env.step(HighwayAction::Idle.into()).unwrap();
        assert!(t.done && t.terminal);
        assert!(matches!(t.info, StepInfo::Highway { crashed: true, .. }));
    }

    #[test]
    fn speed_levels_saturate() {
        let mut env = Highway::with_traffic(1, 1, far_traffic());
        env.step(HighwayAction::Faster.into()).unwrap();
        env.step(HighwayAction::Faster.into()).unwrap();
        assert_eq!(env.ego.speed, 30.0);
        for _ in 0..3 {
            env.step(HighwayAction::Slower.into()).unwrap();
        }
        assert_eq!(env.ego.speed, 20.0);
    }

    #[test]
    fn reset_bounds_over_many_draws() {
        let mut rng = stream(4, Stream::TrainEnv);
        let mut env = Highway::default();
        for _ in 0..1_000 {
            let s = env.reset(&mut rng);
            assert_eq!(env.traffic.len(), 4);
            assert_eq!(env.ego.lane, 1);
            assert_eq!(env.ego.speed, 25.0);
            for v in &env.traffic {
                assert!((20.0..=25.0).contains(&v.speed));
                assert!((15.0..=80.0).contains(&v.x));
                assert!(v.lane < LANE_COUNT);
            }
            for i in 0..5 {
                assert_eq!(s.features[i * 5], 1.0);
            }
            for (v, spec) in s.features.iter().zip(FEATURES.iter()) {
                assert!(spec.contains(*v), "{} = {v}", spec.name);
            }
        }
    }

    #[test]
    fn lane_index_in_range_over_random_play() {
        let mut rng = stream(8, Stream::TrainEnv);
        let mut env = Highway::default();
        env.reset(&mut rng);
        for _ in 0..5_000 {
            let a = EnvKind::Highway.random_action(&mut rng);
            let t = env.step(a).unwrap();
            let lane = lane_of(t.next_state.features[EGO_Y]);
            assert!((0..LANE_COUNT as i32).contains(&lane));
            for (v, spec) in t.next_state.features.iter().zip(FEATURES.iter()) {
                assert!(spec.contains(*v), "{} = {v}", spec.name);
            }
            if t.done {
                env.reset(&mut rng);
            }
        }
    }
}
