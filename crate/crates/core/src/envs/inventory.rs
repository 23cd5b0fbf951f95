//! Two-week inventory control with Poisson demand.

use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{Action, EnvKind, FeatureSpec, State, StepInfo, Transition};
use crate::error::{ItersError, Result};
use crate::rng::Rng;

pub const MAX_STOCK: u32 = 100;
pub const DEMAND_MEAN: f64 = 30.0;
pub(crate) const HORIZON: usize = 14;
pub(crate) const ORDER_UNIT: u32 = 10;
pub(crate) const SELL_PRICE: f32 = 5.0;
pub(crate) const BUY_PRICE: f32 = 3.0;
pub(crate) const SHORTAGE_COST: f32 = 1.0;
pub(crate) const DELIVERY_COST: f32 = 10.0;

pub(crate) static FEATURES: [FeatureSpec; 1] = [FeatureSpec::discrete("stock", 0.0, MAX_STOCK as f32)];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inventory {
    pub stock: u32,
    pub steps: usize,
    pub done: bool,
}

impl Inventory {
    pub fn with_stock(stock: u32) -> Self {
        Self {
            stock: stock.min(MAX_STOCK),
            ..Self::default()
        }
    }

    pub fn reset(&mut self) -> State {
        *self = Self::default();
        self.observe()
    }

    pub fn observe(&self) -> State {
        State::new(vec![self.stock as f32])
    }

    pub fn step(&mut self, action: Action, rng: &mut Rng) -> Result<Transition> {
        let demand = sample_demand(rng);
        self.step_with_demand(action, demand)
    }

    /// Advances one day with an externally drawn demand.
    pub fn step_with_demand(&mut self, action: Action, demand: u32) -> Result<Transition> {
        EnvKind::Inventory.check_action(action)?;
        if self.done {
            return Err(ItersError::domain("inventory episode already finished"));
        }
        let state = self.observe();
        let order = ORDER_UNIT * action.0 as u32;
        self.stock = (self.stock + order).min(MAX_STOCK);
        let sold = self.stock.min(demand);
        let shortage = demand - sold;
        self.stock -= sold;
        self.steps += 1;
        self.done = self.steps >= HORIZON;
        Ok(Transition {
            state,
            action,
            next_state: self.observe(),
            done: self.done,
            terminal: false,
            info: StepInfo::Inventory {
                order,
                demand,
                sold,
                shortage,
            },
        })
    }
}

pub fn sample_demand(rng: &mut Rng) -> u32 {
    let poisson = Poisson::new(DEMAND_MEAN).expect("positive mean");
    poisson.sample(rng) as u32
}
