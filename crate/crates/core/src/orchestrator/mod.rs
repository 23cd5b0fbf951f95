//! The iteration loop: baseline training, then repeated cycles of training,
//! summarizing, collecting feedback, augmenting, merging and refitting the
//! shaping model.

mod checkpoint;
mod config;

pub use checkpoint::{load_agent, load_records, RunDir};
pub use config::{FeedbackMode, ItersConfig, Scale};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agent::{top_m, variant_reward, DqnAgent};
use crate::augment::build_dataset;
use crate::envs::{reward, EnvKind, RewardVariant, Transition};
use crate::error::{ItersError, Result};
use crate::eval::{evaluate, EvalStats};
use crate::feedback::{simulate_feedback, MarkedTrajectory};
use crate::rng::{stream, substream, Stream};
use crate::shaping::{fit_reward_model, init_buffer, predict_penalty, FeedbackBuffer, MergeReport, RewardModel};
use crate::trajectory::{Episode, TrajectoryWindow};

/// `R_env(t) − λ · max(0, R_s(window))`. Marked behavior is penalized, so the
/// learned term is subtracted; with `λ = 0` or an unfitted model the result
/// is `R_env(t)` exactly.
pub fn shaped_reward(t: &Transition, recent: &TrajectoryWindow, model: &RewardModel, lambda: f32) -> Result<f32> {
    let r_env = reward(t.info.kind(), RewardVariant::EnvMisspecified, t)?;
    if lambda == 0.0 {
        return Ok(r_env);
    }
    Ok(r_env - lambda * predict_penalty(model, recent)?)
}

/// What the loop is doing, as reported to feedback sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Baseline,
    Training,
    Feedback,
    Updating,
    Done,
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Marks received this iteration.
    pub marks: usize,
    pub cum_marks: usize,
    pub ret_true: f32,
    pub ret_env: f32,
    /// Highway only.
    pub lane_rate: Option<f32>,
    /// Wall-clock seconds for the iteration, or 0 when timing is not recorded.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationDetail {
    pub record: IterationRecord,
    pub eval: EvalStats,
    pub merge: MergeReport,
    /// Fewer summary episodes than `m` were available.
    pub summaries_flagged: bool,
}

/// A checkpoint's summaries, handed to whoever gives feedback.
pub struct FeedbackRequest<'a> {
    pub iteration: usize,
    pub env: EnvKind,
    pub l: usize,
    pub summaries: &'a [Episode],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeedbackResponse {
    pub marks: Vec<MarkedTrajectory>,
    /// The user is done; the loop stops after this iteration.
    pub satisfied: bool,
}

pub trait FeedbackSource {
    fn collect(&mut self, req: &FeedbackRequest<'_>) -> Result<FeedbackResponse>;

    fn on_phase(&mut self, _iteration: usize, _phase: Phase) {}

    fn on_record(&mut self, _detail: &IterationDetail) {}
}

/// The environment's scripted user; never satisfied, never blocks.
pub struct SimulatedUser {
    seed: u64,
}

impl SimulatedUser {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl FeedbackSource for SimulatedUser {
    fn collect(&mut self, req: &FeedbackRequest<'_>) -> Result<FeedbackResponse> {
        let mut rng = substream(self.seed, Stream::Padding, req.iteration as u64);
        Ok(FeedbackResponse {
            marks: simulate_feedback(req.env, req.summaries, req.l, &mut rng)?,
            satisfied: false,
        })
    }
}

/// A DQN trained on one reward variant for the full run budget.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub variant: RewardVariant,
    pub agent: DqnAgent,
    pub eval: EvalStats,
}

pub fn train_baseline(cfg: &ItersConfig, variant: RewardVariant, seed: u64) -> Result<Baseline> {
    let mut agent = DqnAgent::new(cfg.env, cfg.dqn, cfg.l, seed)?;
    agent.train_steps(cfg.baseline_budget(), &mut variant_reward(cfg.env, variant))?;
    let eval = evaluate(&agent, cfg.eval_episodes, &mut stream(seed, Stream::Eval))?;
    log::info!(
        "{} baseline ({variant:?}, seed {seed}): R_true {:.3}, R_env {:.3}",
        cfg.env,
        eval.ret_true,
        eval.ret_env
    );
    Ok(Baseline { variant, agent, eval })
}

pub struct RunOutcome {
    pub records: Vec<IterationRecord>,
    pub details: Vec<IterationDetail>,
    pub agent: DqnAgent,
    pub buffer: FeedbackBuffer,
    pub model: RewardModel,
}

/// Runs the loop for one seed. `baseline` supplies an already trained
/// environment-reward agent (it must match `cfg` and `seed`); otherwise one
/// is trained here. Checkpoints go to `cfg.run_dir` when set.
pub fn run_iters(
    cfg: &ItersConfig,
    seed: u64,
    source: &mut dyn FeedbackSource,
    baseline: Option<&Baseline>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.run_dir.as_ref().map(RunDir::new).transpose()?;
    let resumed = match (&dir, cfg.resume) {
        (Some(d), true) => d.load_latest(cfg.env, cfg.l)?,
        _ => None,
    };
    let (start, mut agent, mut buffer, mut model, mut details) = match resumed {
        Some(r) => {
            log::info!("resuming after iteration {}", r.iteration);
            (r.iteration, r.agent, r.buffer, r.model, r.details)
        }
        None => {
            source.on_phase(0, Phase::Baseline);
            let trained;
            let m_env = match baseline {
                Some(b) if b.variant == RewardVariant::EnvMisspecified => b,
                Some(_) => return Err(ItersError::domain("the shared baseline must be trained on the environment reward")),
                None => {
                    trained = train_baseline(cfg, RewardVariant::EnvMisspecified, seed)?;
                    &trained
                }
            };
            let rollouts = m_env.agent.unroll(
                cfg.baseline_rollouts,
                cfg.baseline_epsilon,
                &mut variant_reward(cfg.env, RewardVariant::EnvMisspecified),
                &mut stream(seed, Stream::Baseline),
            )?;
            let buffer = init_buffer(&rollouts, cfg.l, cfg.baseline_cap, &mut stream(seed, Stream::Buffer))?;
            let model = RewardModel::new(cfg.env, cfg.l, cfg.fit.lr, &mut stream(seed, Stream::RewardModel));
            let agent = DqnAgent::new(cfg.env, cfg.dqn, cfg.l, seed)?;
            if let Some(d) = &dir {
                d.write_config(cfg)?;
                d.save_initial(&agent, &buffer, &model)?;
                d.write_metrics(&[])?;
            }
            (0, agent, buffer, model, Vec::new())
        }
    };

    let mut cum_marks = details.last().map_or(0, |d: &IterationDetail| d.record.cum_marks);
    for i in start + 1..=cfg.n {
        let started = Instant::now();
        let step = run_iteration(cfg, seed, i, source, &mut agent, &mut buffer, &mut model);
        let (mut detail, summaries, marks, satisfied, prev_len) =
            step.map_err(|e| ItersError::Iteration {
                iteration: i,
                source: Box::new(e),
            })?;
        cum_marks += detail.record.marks;
        detail.record.cum_marks = cum_marks;
        if cfg.record_wall_clock {
            detail.record.seconds = started.elapsed().as_secs_f64();
        }
        log::info!(
            "iter {i}: marks {} (total {cum_marks}), R_true {:.3}, R_env {:.3}",
            detail.record.marks,
            detail.record.ret_true,
            detail.record.ret_env
        );
        details.push(detail);
        if let Some(d) = &dir {
            d.save_iteration(i, &agent, &buffer, prev_len, &model, &summaries, &marks, details.last().unwrap())?;
            d.write_metrics(&details.iter().map(|d| d.record.clone()).collect::<Vec<_>>())?;
        }
        source.on_record(details.last().unwrap());
        if satisfied {
            break;
        }
    }
    source.on_phase(details.len(), Phase::Done);
    Ok(RunOutcome {
        records: details.iter().map(|d| d.record.clone()).collect(),
        details,
        agent,
        buffer,
        model,
    })
}

type IterationOutput = (IterationDetail, Vec<Episode>, Vec<MarkedTrajectory>, bool, usize);

fn run_iteration(
    cfg: &ItersConfig,
    seed: u64,
    i: usize,
    source: &mut dyn FeedbackSource,
    agent: &mut DqnAgent,
    buffer: &mut FeedbackBuffer,
    model: &mut RewardModel,
) -> Result<IterationOutput> {
    source.on_phase(i, Phase::Training);
    let mut shaped = |t: &Transition, w: &TrajectoryWindow| shaped_reward(t, w, model, cfg.lambda);
    agent.train_steps(cfg.k, &mut shaped)?;
    let rollouts = agent.unroll(
        cfg.summary_episodes,
        cfg.summary_epsilon,
        &mut shaped,
        &mut substream(seed, Stream::Summary, i as u64),
    )?;
    let (summaries, flagged) = top_m(&rollouts, cfg.m)?;

    source.on_phase(i, Phase::Feedback);
    let response = source.collect(&FeedbackRequest {
        iteration: i,
        env: cfg.env,
        l: cfg.l,
        summaries: &summaries,
    })?;
    for mark in &response.marks {
        if mark.window.kind != cfg.env {
            return Err(ItersError::domain(format!("mark for {} in a {} run", mark.window.kind, cfg.env)));
        }
        mark.validate(cfg.l)?;
    }

    source.on_phase(i, Phase::Updating);
    let dataset = build_dataset(
        &response.marks,
        &cfg.augment_config(),
        &mut substream(seed, Stream::Augment, i as u64),
    )?;
    let prev_len = buffer.len();
    let merge = buffer.merge_feedback(&dataset)?;
    fit_reward_model(model, buffer, &cfg.fit, &mut substream(seed, Stream::RewardModel, i as u64))?;

    let eval = evaluate(agent, cfg.eval_episodes, &mut stream(seed, Stream::Eval))?;
    let detail = IterationDetail {
        record: IterationRecord {
            iter: i,
            marks: response.marks.len(),
            cum_marks: 0,
            ret_true: eval.ret_true,
            ret_env: eval.ret_env,
            lane_rate: eval.lane_rate,
            seconds: 0.0,
        },
        eval,
        merge,
        summaries_flagged: flagged,
    };
    Ok((detail, summaries, response.marks, response.satisfied, prev_len))
}
