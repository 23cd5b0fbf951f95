//! The shaping regressor: encoded window in, predicted mark count out.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::FeedbackBuffer;
use crate::envs::EnvKind;
use crate::error::{ItersError, Result};
use crate::nn::{Adam, Mlp};
use crate::rng::Rng;
use crate::trajectory::{encode, encoded_dim, TrajectoryWindow};

const HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    /// Lower bound on gradient updates per fit, so tiny buffers still converge.
    pub min_updates: usize,
    /// Upper bound on gradient updates per fit, so huge buffers stay affordable.
    pub max_updates: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 256,
            lr: 1e-3,
            min_updates: 300,
            max_updates: 1_000,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(ItersError::config("fit.batch", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ItersError::config("fit.lr", "must be positive"));
        }
        if self.min_updates > self.max_updates {
            return Err(ItersError::config("fit.min_updates", "exceeds fit.max_updates"));
        }
        Ok(())
    }

    /// Updates for a buffer of `n` entries.
    pub fn updates_for(&self, n: usize) -> usize {
        let per_epoch = n.div_ceil(self.batch);
        (self.epochs * per_epoch).clamp(self.min_updates, self.max_updates)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardModel {
    env: EnvKind,
    l: usize,
    net: Mlp,
    opt: Adam,
    /// Set once the model has been fitted on a buffer holding feedback.
    active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub updates: usize,
    /// Mean squared error over the last epoch's worth of updates.
    pub loss: f32,
}

impl RewardModel {
    pub fn new(env: EnvKind, l: usize, lr: f32, rng: &mut Rng) -> Self {
        let net = Mlp::new(&[encoded_dim(env, l), HIDDEN, HIDDEN, 1], rng);
        let opt = Adam::new(&net, lr);
        Self {
            env,
            l,
            net,
            opt,
            active: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    /// Raw network output for an encoded window.
    pub fn predict_encoded(&self, encoded: &[f32]) -> f32 {
        self.net.forward_one(encoded)[0]
    }

    pub fn predict_batch(&self, rows: ArrayView2<f32>) -> Vec<f32> {
        self.net.forward(rows).into_raw_vec_and_offset().0
    }
}

/// Warm-started minibatch regression of the buffer's marks.
pub fn fit_reward_model(model: &mut RewardModel, buf: &FeedbackBuffer, cfg: &FitConfig, rng: &mut Rng) -> Result<FitReport> {
    cfg.validate()?;
    if buf.is_empty() {
        return Err(ItersError::domain("cannot fit the reward model on an empty buffer"));
    }
    if buf.dim() != model.input_dim() {
        return Err(ItersError::domain(format!(
            "buffer rows have {} values but the model expects {}",
            buf.dim(),
            model.input_dim()
        )));
    }
    model.opt.lr = cfg.lr;
    let n = buf.len();
    let batch = cfg.batch.min(n);
    let updates = cfg.updates_for(n);
    let tail = n.div_ceil(cfg.batch).min(updates);
    // Unmarked and marked entries fill half a minibatch each. Feedback
    // arrives p windows at a time, so without this the few unmarked windows
    // near a marked pattern are drowned out and the model learns a constant.
    let (unmarked, marked): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| buf.marks()[i] == 0);
    let mut pools: Vec<Pool> = [unmarked, marked].into_iter().filter(|p| !p.is_empty()).map(Pool::new).collect();
    let shares: Vec<usize> = match pools.len() {
        1 => vec![batch],
        _ => vec![batch / 2, batch - batch / 2],
    };
    let mut x = Array2::<f32>::zeros((batch, buf.dim()));
    let mut y = Array2::<f32>::zeros((batch, 1));
    let mut tail_loss = 0.0f64;
    for u in 0..updates {
        let mut r = 0;
        for (pool, &share) in pools.iter_mut().zip(&shares) {
            for _ in 0..share {
                let i = pool.next(rng);
                x.row_mut(r).assign(&ndarray::ArrayView1::from(buf.row(i)));
                y[[r, 0]] = buf.marks()[i] as f32;
                r += 1;
            }
        }
        let tape = model.net.forward_tape(x.view());
        let diff = &tape.output - &y;
        let loss = diff.iter().map(|d| d * d).sum::<f32>() / batch as f32;
        if !loss.is_finite() {
            return Err(ItersError::Training(format!(
                "reward model loss became {loss} at update {u} of {updates} (buffer {n} entries, max mark {})",
                buf.marks().iter().max().copied().unwrap_or(0)
            )));
        }
        if u + tail >= updates {
            tail_loss += loss as f64;
        }
        let grads = model.net.backward(&tape, diff * (2.0 / batch as f32));
        model.opt.step(&mut model.net, grads);
    }
    if buf.has_feedback() {
        model.active = true;
    }
    Ok(FitReport {
        updates,
        loss: (tail_loss / tail.max(1) as f64) as f32,
    })
}

/// Endless reshuffled pass over a set of buffer indices.
struct Pool {
    order: Vec<usize>,
    cursor: usize,
}

impl Pool {
    fn new(order: Vec<usize>) -> Self {
        let cursor = order.len();
        Self { order, cursor }
    }

    fn next(&mut self, rng: &mut Rng) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// `max(0, R_s(w))`, or exactly 0 before the model has seen feedback.
pub fn predict_penalty(model: &RewardModel, w: &TrajectoryWindow) -> Result<f32> {
    if w.kind != model.env || encoded_dim(w.kind, w.len()) != model.input_dim() {
        return Err(ItersError::domain(format!(
            "window ({}, l = {}) does not fit a model for ({}, l = {})",
            w.kind,
            w.len(),
            model.env,
            model.l
        )));
    }
    if !model.active {
        return Ok(0.0);
    }
    Ok(model.predict_encoded(&encode(w)).max(0.0))
}
