//! Deep Q-learning agent trained against a pluggable per-step reward.
//!
//! The agent owns its training environment and the episode in progress, so
//! training can be split into chunks of any size without changing what it
//! sees: `train_steps(a)` then `train_steps(b)` equals `train_steps(a + b)`.

mod replay;

pub use replay::{Batch, ReplayBuffer};

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::{reward, Action, Env, EnvKind, RewardVariant, State, Transition};
use crate::error::{ItersError, Result};
use crate::nn::{Adam, Mlp};
use crate::rng::{stream, Rng, Stream};
use crate::trajectory::{clip_pad, Episode, StepPair, TrajectoryWindow};

/// Per-step reward callback: the transition and the window of the last `l`
/// (state, action) pairs of the current episode, ending with this step.
pub type RewardFn<'a> = dyn FnMut(&Transition, &TrajectoryWindow) -> Result<f32> + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DqnConfig {
    pub gamma: f32,
    pub lr: f32,
    pub batch: usize,
    /// Environment steps between target-network syncs.
    pub target_sync: u64,
    pub eps_start: f32,
    pub eps_end: f32,
    /// Steps over which ε falls linearly from `eps_start` to `eps_end`.
    pub eps_decay_steps: u64,
    /// Steps collected before the first gradient update.
    pub warmup: u64,
    pub replay_capacity: usize,
    pub hidden: usize,
    /// Multiplies rewards before they are stored; keeps Q targets near unit scale.
    pub reward_scale: f32,
    pub max_grad_norm: f32,
    /// Feed the previous `l − 1` actions to the Q-network next to the state.
    /// Shaping penalties depend on the last `l` steps, so without this
    /// memory the shaped problem is not Markov in the agent's input. Off by
    /// default: an agent that can count its recent actions learns to stop
    /// one step short of a marked pattern instead of avoiding it.
    pub action_memory: bool,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 1e-3,
            batch: 64,
            target_sync: 1_000,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_steps: 20_000,
            warmup: 1_000,
            replay_capacity: 50_000,
            hidden: 64,
            reward_scale: 1.0,
            max_grad_norm: 10.0,
            action_memory: false,
        }
    }
}

impl DqnConfig {
    pub fn for_env(kind: EnvKind) -> Self {
        Self {
            // a short discount keeps the small per-day action gaps resolvable
            gamma: match kind {
                EnvKind::Inventory => 0.9,
                _ => 0.99,
            },
            reward_scale: match kind {
                EnvKind::Inventory => 0.01,
                _ => 1.0,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(ItersError::config("dqn.gamma", "must lie in (0, 1]"));
        }
        for (field, eps) in [("dqn.eps_start", self.eps_start), ("dqn.eps_end", self.eps_end)] {
            if !(0.0..=1.0).contains(&eps) {
                return Err(ItersError::config(field, "must lie in [0, 1]"));
            }
        }
        if self.batch == 0 || self.replay_capacity < self.batch {
            return Err(ItersError::config("dqn.batch", "must be positive and fit in the replay buffer"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ItersError::config("dqn.lr", "must be positive"));
        }
        if !(self.reward_scale.is_finite() && self.reward_scale > 0.0) {
            return Err(ItersError::config("dqn.reward_scale", "must be positive"));
        }
        Ok(())
    }

    pub fn epsilon(&self, step: u64) -> f32 {
        if step >= self.eps_decay_steps {
            return self.eps_end;
        }
        let frac = step as f32 / self.eps_decay_steps as f32;
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

/// Network input for a state: each feature normalized by its spec.
pub fn state_input(kind: EnvKind, s: &State) -> Vec<f32> {
    kind.feature_specs()
        .iter()
        .zip(&s.features)
        .map(|(spec, &v)| spec.normalize(v))
        .collect()
}

fn argmax_lowest(q: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// [`state_input`] followed by one-hot codes of the last `memory` actions
/// of `prev` (chronological), most recent first; missing ones stay zero.
pub fn agent_input(kind: EnvKind, s: &State, prev: &[Action], memory: usize) -> Vec<f32> {
    let n = kind.n_actions();
    let mut x = state_input(kind, s);
    x.resize(x.len() + memory * n, 0.0);
    for (j, a) in prev.iter().rev().take(memory).enumerate() {
        x[kind.state_dim() + j * n + a.0] = 1.0;
    }
    x
}

/// ε-greedy over the network's Q-values for an input row; ties go to the
/// lowest index.
pub fn act(net: &Mlp, kind: EnvKind, input: &[f32], epsilon: f32, rng: &mut Rng) -> Action {
    if epsilon > 0.0 && rng.random::<f32>() < epsilon {
        return Action(rng.random_range(0..kind.n_actions()));
    }
    Action(argmax_lowest(&net.forward_one(input)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub episodes: u64,
    /// Mean TD loss over the updates in this call (0 if none).
    pub loss: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DqnAgent {
    kind: EnvKind,
    cfg: DqnConfig,
    l: usize,
    /// Previous actions in the network input.
    memory: usize,
    q: Mlp,
    target: Mlp,
    opt: Adam,
    replay: ReplayBuffer,
    env: Env,
    state: Option<State>,
    history: VecDeque<StepPair>,
    steps: u64,
    updates: u64,
    episodes: u64,
    explore_rng: Rng,
    env_rng: Rng,
    replay_rng: Rng,
    pad_rng: Rng,
}

impl DqnAgent {
    /// A fresh agent; every random stream derives from `seed`.
    pub fn new(kind: EnvKind, cfg: DqnConfig, l: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if l == 0 {
            return Err(ItersError::config("l", "window length must be at least 1"));
        }
        let memory = if cfg.action_memory { l - 1 } else { 0 };
        let input_dim = kind.state_dim() + memory * kind.n_actions();
        let mut init = stream(seed, Stream::NetInit);
        let q = Mlp::new(&[input_dim, cfg.hidden, cfg.hidden, kind.n_actions()], &mut init);
        let opt = Adam::new(&q, cfg.lr).with_grad_clip(cfg.max_grad_norm);
        Ok(Self {
            kind,
            cfg,
            l,
            memory,
            target: q.clone(),
            q,
            opt,
            replay: ReplayBuffer::new(cfg.replay_capacity, input_dim),
            env: Env::new(kind),
            state: None,
            history: VecDeque::with_capacity(l),
            steps: 0,
            updates: 0,
            episodes: 0,
            explore_rng: stream(seed, Stream::Exploration),
            env_rng: stream(seed, Stream::TrainEnv),
            replay_rng: stream(seed, Stream::Replay),
            pad_rng: stream(seed, Stream::Padding),
        })
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn config(&self) -> &DqnConfig {
        &self.cfg
    }

    pub fn window_len(&self) -> usize {
        self.l
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn epsilon(&self) -> f32 {
        self.cfg.epsilon(self.steps)
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn q_network(&self) -> &Mlp {
        &self.q
    }

    /// Number of previous actions the network sees.
    pub fn memory(&self) -> usize {
        self.memory
    }

    pub fn input(&self, s: &State, prev: &[Action]) -> Vec<f32> {
        agent_input(self.kind, s, prev, self.memory)
    }

    /// Q-values for `s` given the episode's earlier actions (chronological).
    pub fn q_values(&self, s: &State, prev: &[Action]) -> Vec<f32> {
        self.q.forward_one(&self.input(s, prev))
    }

    pub fn act(&self, s: &State, prev: &[Action], epsilon: f32, rng: &mut Rng) -> Action {
        act(&self.q, self.kind, &self.input(s, prev), epsilon, rng)
    }

    fn recent_actions(&self) -> Vec<Action> {
        self.history.iter().map(|p| p.action).collect()
    }

    /// Runs `k` environment steps of ε-greedy collection and learning.
    pub fn train_steps(&mut self, k: u64, reward_fn: &mut RewardFn<'_>) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        let mut loss_sum = 0.0f64;
        let mut loss_count = 0u64;
        for _ in 0..k {
            let state = match self.state.take() {
                Some(s) => s,
                None => {
                    self.history.clear();
                    self.env.reset(&mut self.env_rng)
                }
            };
            if self.history.len() == self.l {
                self.history.pop_front();
            }
            let input = self.input(&state, &self.recent_actions());
            let action = act(&self.q, self.kind, &input, self.cfg.epsilon(self.steps), &mut self.explore_rng);
            self.history.push_back(StepPair::new(state.clone(), action));
            let window = clip_pad(self.kind, self.history.make_contiguous(), self.l, &mut self.pad_rng)?;
            let t = self.env.step(action, &mut self.env_rng)?;
            let r = reward_fn(&t, &window)?;
            if !r.is_finite() {
                return Err(ItersError::Training(format!("reward callback returned {r} at step {}", self.steps)));
            }
            let next_input = self.input(&t.next_state, &self.recent_actions());
            self.replay.push(&input, action.0, r * self.cfg.reward_scale, &next_input, t.terminal);
            self.steps += 1;
            report.steps += 1;
            if t.done {
                self.episodes += 1;
                report.episodes += 1;
            } else {
                self.state = Some(t.next_state);
            }
            if self.steps > self.cfg.warmup && self.replay.len() >= self.cfg.batch {
                loss_sum += self.update()? as f64;
                loss_count += 1;
            }
            if self.steps % self.cfg.target_sync == 0 {
                self.target.copy_from(&self.q);
            }
        }
        report.loss = if loss_count > 0 { (loss_sum / loss_count as f64) as f32 } else { 0.0 };
        Ok(report)
    }

    fn update(&mut self) -> Result<f32> {
        let n = self.cfg.batch;
        let d = self.q.input_dim();
        let b = self.replay.sample(n, &mut self.replay_rng);
        let s = ArrayView2::from_shape((n, d), &b.states).expect("batch layout");
        let s2 = ArrayView2::from_shape((n, d), &b.next_states).expect("batch layout");
        let next_q = self.target.forward(s2);
        let tape = self.q.forward_tape(s);
        let mut grad = Array2::<f32>::zeros(tape.output.raw_dim());
        let mut loss = 0.0f32;
        for i in 0..n {
            let bootstrap = if b.terminal[i] {
                0.0
            } else {
                next_q.row(i).iter().copied().fold(f32::NEG_INFINITY, f32::max)
            };
            let target = b.rewards[i] + self.cfg.gamma * bootstrap;
            let td = tape.output[[i, b.actions[i]]] - target;
            // Huber with delta 1
            loss += if td.abs() <= 1.0 { 0.5 * td * td } else { td.abs() - 0.5 };
            grad[[i, b.actions[i]]] = td.clamp(-1.0, 1.0) / n as f32;
        }
        loss /= n as f32;
        if !loss.is_finite() {
            return Err(ItersError::Training(format!(
                "Q loss became {loss} after {} updates ({} steps)",
                self.updates, self.steps
            )));
        }
        let grads = self.q.backward(&tape, grad);
        self.opt.step(&mut self.q, grads);
        self.updates += 1;
        Ok(loss)
    }

    /// Rollouts with ε-greedy actions in a fresh environment, each episode
    /// scored by `reward_fn`.
    pub fn unroll(&self, episodes: usize, epsilon: f32, reward_fn: &mut RewardFn<'_>, rng: &mut Rng) -> Result<Vec<Episode>> {
        let mut policy = |s: &State, past: &[Transition], rng: &mut Rng| {
            let prev: Vec<Action> = past.iter().rev().take(self.memory).rev().map(|t| t.action).collect();
            self.act(s, &prev, epsilon, rng)
        };
        unroll_policy(self.kind, self.l, episodes, &mut policy, reward_fn, rng)
    }
}

/// Scores transitions with one of the environment's reward variants.
pub fn variant_reward(kind: EnvKind, variant: RewardVariant) -> impl FnMut(&Transition, &TrajectoryWindow) -> Result<f32> {
    move |t, _| reward(kind, variant, t)
}

/// Rollouts of an arbitrary policy `(state, earlier transitions, rng) -> action`.
pub fn unroll_policy(
    kind: EnvKind,
    l: usize,
    episodes: usize,
    policy: &mut dyn FnMut(&State, &[Transition], &mut Rng) -> Action,
    reward_fn: &mut RewardFn<'_>,
    rng: &mut Rng,
) -> Result<Vec<Episode>> {
    if episodes == 0 {
        return Err(ItersError::domain("unroll needs at least one episode"));
    }
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut env = Env::new(kind);
        let mut state = env.reset(rng);
        let mut history: VecDeque<StepPair> = VecDeque::with_capacity(l);
        let mut transitions = Vec::new();
        let mut ret = 0.0;
        loop {
            let action = policy(&state, &transitions, rng);
            if history.len() == l {
                history.pop_front();
            }
            history.push_back(StepPair::new(state.clone(), action));
            let window = clip_pad(kind, history.make_contiguous(), l, rng)?;
            let t = env.step(action, rng)?;
            ret += reward_fn(&t, &window)?;
            let done = t.done;
            state = t.next_state.clone();
            transitions.push(t);
            if done {
                break;
            }
        }
        out.push(Episode { kind, transitions, ret });
    }
    Ok(out)
}

/// The `m` highest-return episodes, best first, stable on ties. The flag is
/// set when fewer than `m` episodes were available.
pub fn top_m(episodes: &[Episode], m: usize) -> Result<(Vec<Episode>, bool)> {
    if m == 0 {
        return Err(ItersError::domain("m must be at least 1"));
    }
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    order.sort_by(|&a, &b| episodes[b].ret.total_cmp(&episodes[a].ret));
    let flagged = m > episodes.len();
    Ok((order.into_iter().take(m).map(|i| episodes[i].clone()).collect(), flagged))
}
