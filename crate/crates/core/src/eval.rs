//! Policy evaluation, the lane-change metric, and λ × seed experiment grids.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{unroll_policy, variant_reward, DqnAgent};
use crate::envs::{lane_of, reward, Action, EnvKind, RewardVariant, State, StepInfo, Transition, EGO_Y};
use crate::error::{ItersError, Result};
use crate::feedback::count_lane_changes;
use crate::orchestrator::{run_iters, train_baseline, IterationRecord, ItersConfig, SimulatedUser};
use crate::rng::Rng;
use crate::trajectory::{sliding_windows, Episode};

/// Window length of the lane-change metric.
pub const LANE_WINDOW: usize = 5;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub episodes: usize,
    pub ret_true: f32,
    pub ret_true_std: f32,
    pub ret_env: f32,
    pub ret_env_std: f32,
    /// GridWorld: fraction of episodes ending at the goal.
    pub goal_rate: Option<f32>,
    /// Highway: mean lane changes per 5-step window.
    pub lane_rate: Option<f32>,
    /// Highway: fraction of episodes ending in a crash.
    pub crash_rate: Option<f32>,
    /// Inventory: mean days with an order, per week.
    pub orders_per_week: Option<f32>,
}

fn mean_std(xs: &[f32]) -> (f32, f32) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean as f32, var.sqrt() as f32)
}

/// Return of an episode under a reward variant.
pub fn episode_return(ep: &Episode, variant: RewardVariant) -> Result<f32> {
    ep.transitions.iter().map(|t| reward(ep.kind, variant, t)).sum()
}

/// Mean lane changes over all stride-1 5-step windows of the episodes.
/// Episodes shorter than five steps count as one short window.
pub fn lane_change_rate_of(episodes: &[Episode]) -> Result<f32> {
    let mut total = 0usize;
    let mut windows = 0usize;
    for ep in episodes {
        if ep.kind != EnvKind::Highway {
            return Err(ItersError::domain(format!("lane changes are undefined for {}", ep.kind)));
        }
        let lanes: Vec<i32> = ep.transitions.iter().map(|t| lane_of(t.state.features[EGO_Y])).collect();
        for (_, seg) in sliding_windows(&lanes, LANE_WINDOW, 1)? {
            total += count_lane_changes(seg.iter().copied());
            windows += 1;
        }
    }
    if windows == 0 {
        return Err(ItersError::domain("no windows to measure"));
    }
    Ok(total as f32 / windows as f32)
}

/// Greedy rollouts scored under both reward variants, plus per-environment
/// behavior statistics.
pub fn evaluate_episodes(episodes: &[Episode]) -> Result<EvalStats> {
    if episodes.is_empty() {
        return Err(ItersError::domain("evaluation needs at least one episode"));
    }
    let kind = episodes[0].kind;
    let rt: Vec<f32> = episodes.iter().map(|e| episode_return(e, RewardVariant::True)).collect::<Result<_>>()?;
    let re: Vec<f32> = episodes
        .iter()
        .map(|e| episode_return(e, RewardVariant::EnvMisspecified))
        .collect::<Result<_>>()?;
    let (ret_true, ret_true_std) = mean_std(&rt);
    let (ret_env, ret_env_std) = mean_std(&re);
    let frac = |pred: &dyn Fn(&StepInfo) -> bool| {
        episodes.iter().filter(|e| e.transitions.last().is_some_and(|t| pred(&t.info))).count() as f32 / episodes.len() as f32
    };
    let mut stats = EvalStats {
        episodes: episodes.len(),
        ret_true,
        ret_true_std,
        ret_env,
        ret_env_std,
        ..EvalStats::default()
    };
    match kind {
        EnvKind::GridWorld => stats.goal_rate = Some(frac(&|i| matches!(i, StepInfo::GridWorld { reached_goal: true, .. }))),
        EnvKind::Highway => {
            stats.lane_rate = Some(lane_change_rate_of(episodes)?);
            stats.crash_rate = Some(frac(&|i| matches!(i, StepInfo::Highway { crashed: true, .. })));
        }
        EnvKind::Inventory => {
            let days: usize = episodes.iter().map(|e| e.len()).sum();
            let orders = episodes
                .iter()
                .flat_map(|e| &e.transitions)
                .filter(|t| matches!(t.info, StepInfo::Inventory { order, .. } if order > 0))
                .count();
            stats.orders_per_week = Some(7.0 * orders as f32 / days as f32);
        }
    }
    Ok(stats)
}

pub fn evaluate(agent: &DqnAgent, episodes: usize, rng: &mut Rng) -> Result<EvalStats> {
    let eps = agent.unroll(episodes, 0.0, &mut variant_reward(agent.kind(), RewardVariant::True), rng)?;
    evaluate_episodes(&eps)
}

/// Mean and standard deviation of greedy returns under `variant`.
pub fn evaluate_policy(agent: &DqnAgent, variant: RewardVariant, episodes: usize, rng: &mut Rng) -> Result<(f32, f32)> {
    let eps = agent.unroll(episodes, 0.0, &mut variant_reward(agent.kind(), variant), rng)?;
    Ok(mean_std(&eps.iter().map(|e| e.ret).collect::<Vec<_>>()))
}

pub fn lane_change_rate(agent: &DqnAgent, episodes: usize, rng: &mut Rng) -> Result<f32> {
    if agent.kind() != EnvKind::Highway {
        return Err(ItersError::domain(format!("lane changes are undefined for {}", agent.kind())));
    }
    let eps = agent.unroll(episodes, 0.0, &mut variant_reward(EnvKind::Highway, RewardVariant::True), rng)?;
    lane_change_rate_of(&eps)
}

/// Greedy-equivalent evaluation of a scripted policy `(state, step) -> action`.
pub fn evaluate_scripted(
    kind: EnvKind,
    episodes: usize,
    policy: &mut dyn FnMut(&State, &[Transition], &mut Rng) -> Action,
    rng: &mut Rng,
) -> Result<EvalStats> {
    let eps = unroll_policy(kind, LANE_WINDOW, episodes, policy, &mut variant_reward(kind, RewardVariant::True), rng)?;
    evaluate_episodes(&eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub env: EnvKind,
    pub lambdas: Vec<f32>,
    pub seeds: Vec<u64>,
    /// Template for every cell; its `lambda` and `seeds` are overridden.
    pub base: ItersConfig,
}

impl ExperimentGrid {
    /// The λ values studied per environment, with three seeds.
    pub fn standard(base: ItersConfig) -> Self {
        let lambdas = match base.env {
            EnvKind::GridWorld => vec![0.01, 0.05, 0.1, 0.2],
            EnvKind::Inventory => vec![0.01, 0.1, 0.2, 0.5],
            EnvKind::Highway => vec![0.5, 1.0, 2.0],
        };
        Self {
            env: base.env,
            lambdas,
            seeds: vec![0, 1, 2],
            base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(ItersError::config("lambda", format!("grid value {l} must be >= 0")));
        }
        if self.lambdas.is_empty() || self.seeds.is_empty() {
            return Err(ItersError::config("lambdas", "grid needs at least one λ and one seed"));
        }
        if self.base.env != self.env {
            return Err(ItersError::config("env", "grid env differs from its base config"));
        }
        self.base.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda: f32,
    pub seed: u64,
    /// Records, or the error that ended the cell.
    pub outcome: std::result::Result<Vec<IterationRecord>, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStats {
    pub seed: u64,
    pub m_env: EvalStats,
    pub m_true: EvalStats,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iter: usize,
    pub seeds: usize,
    pub ret_true_mean: f32,
    pub ret_true_std: f32,
    pub cum_marks_mean: f32,
    pub lane_rate_mean: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRow {
    pub lambda: f32,
    pub seeds_ok: usize,
    pub cum_marks_mean: f32,
    pub cum_marks_std: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
    pub references: Vec<ReferenceStats>,
    /// Per λ (in grid order), the seed-averaged curve.
    pub curves: Vec<(f32, Vec<CurvePoint>)>,
    pub feedback: Vec<FeedbackRow>,
}

/// Seed-averaged curve over successful cells. Cells are sorted by seed
/// first, so the result does not depend on the order runs finished in.
pub fn aggregate_curve(cells: &[&GridCell]) -> Vec<CurvePoint> {
    let mut ok: Vec<(u64, &Vec<IterationRecord>)> = cells
        .iter()
        .filter_map(|c| c.outcome.as_ref().ok().map(|r| (c.seed, r)))
        .collect();
    ok.sort_by_key(|(seed, _)| *seed);
    let mut by_iter: BTreeMap<usize, Vec<&IterationRecord>> = BTreeMap::new();
    for (_, records) in &ok {
        for r in records.iter() {
            by_iter.entry(r.iter).or_default().push(r);
        }
    }
    by_iter
        .into_iter()
        .map(|(iter, rs)| {
            let (ret_true_mean, ret_true_std) = mean_std(&rs.iter().map(|r| r.ret_true).collect::<Vec<_>>());
            let (cum_marks_mean, _) = mean_std(&rs.iter().map(|r| r.cum_marks as f32).collect::<Vec<_>>());
            let lanes: Vec<f32> = rs.iter().filter_map(|r| r.lane_rate).collect();
            CurvePoint {
                iter,
                seeds: rs.len(),
                ret_true_mean,
                ret_true_std,
                cum_marks_mean,
                lane_rate_mean: (!lanes.is_empty()).then(|| mean_std(&lanes).0),
            }
        })
        .collect()
}

fn feedback_row(lambda: f32, cells: &[&GridCell]) -> FeedbackRow {
    let mut totals: Vec<(u64, f32)> = cells
        .iter()
        .filter_map(|c| {
            let records = c.outcome.as_ref().ok()?;
            Some((c.seed, records.last().map_or(0, |r| r.cum_marks) as f32))
        })
        .collect();
    totals.sort_by_key(|(seed, _)| *seed);
    let values: Vec<f32> = totals.iter().map(|(_, v)| *v).collect();
    let (cum_marks_mean, cum_marks_std) = if values.is_empty() { (0.0, 0.0) } else { mean_std(&values) };
    FeedbackRow {
        lambda,
        seeds_ok: values.len(),
        cum_marks_mean,
        cum_marks_std,
    }
}

/// Runs every (λ, seed) cell with simulated feedback. Baselines are trained
/// once per seed and shared across λ. A failing cell is recorded and the
/// grid moves on. With `out_dir`, CSV files are written there and each
/// cell's checkpoints go to `out_dir/lambda_<λ>/seed_<s>`.
pub fn run_grid(grid: &ExperimentGrid, out_dir: Option<&Path>) -> Result<GridReport> {
    grid.validate()?;
    let mut cells = Vec::new();
    let mut references = Vec::new();
    for &seed in &grid.seeds {
        let m_env = train_baseline(&grid.base, RewardVariant::EnvMisspecified, seed)?;
        let m_true = train_baseline(&grid.base, RewardVariant::True, seed)?;
        references.push(ReferenceStats {
            seed,
            m_env: m_env.eval.clone(),
            m_true: m_true.eval,
        });
        for &lambda in &grid.lambdas {
            let mut cfg = grid.base.clone();
            cfg.lambda = lambda;
            cfg.seeds = vec![seed];
            cfg.run_dir = out_dir.map(|d| d.join(format!("lambda_{lambda}")).join(format!("seed_{seed}")));
            let outcome = run_iters(&cfg, seed, &mut SimulatedUser::new(seed), Some(&m_env))
                .map(|o| o.records)
                .map_err(|e| {
                    log::warn!("grid cell λ={lambda} seed={seed} failed: {e}");
                    e.to_string()
                });
            cells.push(GridCell { lambda, seed, outcome });
        }
    }
    let mut curves = Vec::new();
    let mut feedback = Vec::new();
    for &lambda in &grid.lambdas {
        let of_lambda: Vec<&GridCell> = cells.iter().filter(|c| c.lambda == lambda).collect();
        curves.push((lambda, aggregate_curve(&of_lambda)));
        feedback.push(feedback_row(lambda, &of_lambda));
    }
    let report = GridReport {
        cells,
        references,
        curves,
        feedback,
    };
    if let Some(dir) = out_dir {
        write_grid(&report, dir)?;
    }
    Ok(report)
}

fn csv_err(e: csv::Error) -> ItersError {
    ItersError::Serialization(e.to_string())
}

/// Writes `grid_metrics.csv`, `feedback_table.csv`, `references.csv` and one
/// `curve_lambda_<λ>.csv` per λ.
pub fn write_grid(report: &GridReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("grid_metrics.csv")).map_err(csv_err)?;
    w.write_record(["lambda", "seed", "iter", "marks", "cum_marks", "ret_true", "ret_env", "lane_rate", "status"])
        .map_err(csv_err)?;
    for c in &report.cells {
        let (lambda, seed) = (c.lambda.to_string(), c.seed.to_string());
        match &c.outcome {
            Ok(records) => {
                for r in records {
                    w.write_record([
                        lambda.clone(),
                        seed.clone(),
                        r.iter.to_string(),
                        r.marks.to_string(),
                        r.cum_marks.to_string(),
                        r.ret_true.to_string(),
                        r.ret_env.to_string(),
                        r.lane_rate.map(|x| x.to_string()).unwrap_or_default(),
                        "ok".into(),
                    ])
                    .map_err(csv_err)?;
                }
            }
            Err(msg) => {
                let mut row = vec![lambda, seed];
                row.extend(std::iter::repeat_n(String::new(), 6));
                row.push(format!("error: {msg}"));
                w.write_record(row).map_err(csv_err)?;
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("feedback_table.csv")).map_err(csv_err)?;
    for row in &report.feedback {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("references.csv")).map_err(csv_err)?;
    w.write_record(["seed", "agent", "ret_true", "ret_true_std", "ret_env", "goal_rate", "lane_rate", "orders_per_week"])
        .map_err(csv_err)?;
    let opt = |x: Option<f32>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in &report.references {
        for (name, s) in [("m_env", &r.m_env), ("m_true", &r.m_true)] {
            w.write_record([
                r.seed.to_string(),
                name.to_string(),
                s.ret_true.to_string(),
                s.ret_true_std.to_string(),
                s.ret_env.to_string(),
                opt(s.goal_rate),
                opt(s.lane_rate),
                opt(s.orders_per_week),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;

    for (lambda, curve) in &report.curves {
        let mut w = csv::Writer::from_path(dir.join(format!("curve_lambda_{lambda}.csv"))).map_err(csv_err)?;
        for p in curve {
            w.serialize(p).map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(())
}
