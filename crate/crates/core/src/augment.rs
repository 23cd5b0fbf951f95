//! Explanation-driven augmentation: each marked window becomes `p` similar
//! windows that keep the important elements and resample everything else.

use rand::seq::{IndexedRandom, SliceRandom};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::envs::{Action, EnvKind, FeatureSpec, State};
use crate::error::{ItersError, Result};
use crate::feedback::{evaluate_rule, Explanation, ExplanationKind, MarkedTrajectory, Rule, Subject};
use crate::rng::Rng;
use crate::trajectory::{StepPair, TrajectoryWindow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Augmented windows generated per mark.
    pub p: usize,
    pub noise_mean: f32,
    pub noise_std: f32,
    /// Random draws per rule-based sample before falling back to repair.
    pub max_rejection_attempts: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p: 10_000,
            noise_mean: 0.0,
            noise_std: 0.001,
            max_rejection_attempts: 100,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(ItersError::config("p", "augmented dataset size must be at least 1"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(ItersError::config("noise_std", "must be finite and non-negative"));
        }
        if !self.noise_mean.is_finite() {
            return Err(ItersError::config("noise_mean", "must be finite"));
        }
        Ok(())
    }
}

/// Which elements of an `l`-step window an explanation pins down. The
/// actual length is always important and is not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMask {
    pub kind: ExplanationKind,
    pub env: EnvKind,
    pub l: usize,
    /// Row-major `l × state_dim`.
    pub features: Vec<bool>,
    pub actions: Vec<bool>,
    pub rule: Option<Rule>,
}

impl ImportanceMask {
    /// Nothing but the actual length is important.
    pub fn unexplained(env: EnvKind, l: usize) -> Self {
        Self {
            kind: ExplanationKind::Unexplained,
            env,
            l,
            features: vec![false; l * env.state_dim()],
            actions: vec![false; l],
            rule: None,
        }
    }

    pub fn feature(&self, step: usize, j: usize) -> bool {
        self.features[step * self.env.state_dim() + j]
    }

    pub fn important_elements(&self) -> usize {
        self.features.iter().chain(&self.actions).filter(|&&b| b).count()
    }
}

pub fn mask_from_explanation(e: &Explanation, w: &TrajectoryWindow) -> ImportanceMask {
    let mut mask = ImportanceMask::unexplained(w.kind, w.len());
    mask.kind = e.kind();
    let d = w.kind.state_dim();
    match e {
        Explanation::Feature { feature_indices } => {
            for step in 0..w.actual_length {
                for &j in feature_indices {
                    if j < d {
                        mask.features[step * d + j] = true;
                    }
                }
            }
        }
        Explanation::Action { mask: steps } => {
            for (slot, &m) in mask.actions.iter_mut().zip(steps).take(w.actual_length) {
                *slot = m;
            }
        }
        Explanation::Rule { rule } => mask.rule = Some(*rule),
    }
    mask
}

/// `p` windows similar to the marked one.
pub fn augment(mt: &MarkedTrajectory, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Vec<TrajectoryWindow>> {
    cfg.validate()?;
    mt.explanation.validate(&mt.window)?;
    let mask = mask_from_explanation(&mt.explanation, &mt.window);
    match &mask.rule {
        Some(rule) => (0..cfg.p).map(|_| rule_sample(rule, &mt.window, cfg, rng)).collect(),
        None => {
            let noise = Normal::new(cfg.noise_mean, cfg.noise_std)
                .map_err(|e| ItersError::config("noise_std", e.to_string()))?;
            Ok((0..cfg.p).map(|_| masked_sample(&mt.window, &mask, &noise, rng)).collect())
        }
    }
}

fn masked_sample(w: &TrajectoryWindow, mask: &ImportanceMask, noise: &Normal<f32>, rng: &mut Rng) -> TrajectoryWindow {
    let specs = w.kind.feature_specs();
    let steps = w
        .steps
        .iter()
        .enumerate()
        .map(|(t, step)| {
            let features = specs
                .iter()
                .enumerate()
                .map(|(j, spec)| {
                    if !mask.feature(t, j) {
                        spec.sample(rng)
                    } else if spec.discrete {
                        step.state.features[j]
                    } else {
                        spec.clamp(step.state.features[j] + noise.sample(rng))
                    }
                })
                .collect();
            let action = if mask.actions[t] {
                step.action
            } else {
                w.kind.random_action(rng)
            };
            StepPair::new(State::new(features), action)
        })
        .collect();
    TrajectoryWindow {
        kind: w.kind,
        steps,
        actual_length: w.actual_length,
    }
}

fn random_window(kind: EnvKind, l: usize, actual_length: usize, rng: &mut Rng) -> TrajectoryWindow {
    TrajectoryWindow {
        kind,
        steps: (0..l).map(|_| StepPair::random(kind, rng)).collect(),
        actual_length,
    }
}

fn rule_sample(rule: &Rule, marked: &TrajectoryWindow, cfg: &AugmentConfig, rng: &mut Rng) -> Result<TrajectoryWindow> {
    let (kind, l, len) = (marked.kind, marked.len(), marked.actual_length);
    let mut candidate = random_window(kind, l, len, rng);
    for _ in 0..cfg.max_rejection_attempts {
        if evaluate_rule(rule, &candidate)? {
            return Ok(candidate);
        }
        candidate = random_window(kind, l, len, rng);
    }
    repair(rule, &mut candidate, rng);
    if evaluate_rule(rule, &candidate)? {
        Ok(candidate)
    } else {
        Err(ItersError::Augmentation {
            rule: rule.to_string(),
            reason: format!(
                "no satisfying window of actual length {len} after {} random draws and repair",
                cfg.max_rejection_attempts
            ),
        })
    }
}

/// Forces steps to satisfy (or violate) the predicate until the count lands
/// in the range the comparator accepts. Leaves the window as is when no
/// value can flip a step.
fn repair(rule: &Rule, w: &mut TrajectoryWindow, rng: &mut Rng) {
    use crate::feedback::Comparator::*;
    let n = w.actual_length as i64;
    let thr = rule.threshold as i64;
    let (lo, hi) = match rule.comparator {
        Gt => (thr + 1, n),
        Ge => (thr, n),
        Lt => (0, thr - 1),
        Le => (0, thr),
    };
    if lo > hi {
        return;
    }
    // a few passes, since delta predicates couple neighbouring steps
    for _ in 0..3 {
        let count = rule.count(w) as i64;
        let want = if count < lo {
            true
        } else if count > hi {
            false
        } else {
            return;
        };
        let mut order: Vec<usize> = (0..w.actual_length).collect();
        order.shuffle(rng);
        let mut needed = if want { lo - count } else { count - hi };
        for t in order {
            if needed == 0 {
                break;
            }
            if rule.step_satisfies(w, t) != want && force_step(rule, w, t, want, rng) {
                needed -= 1;
            }
        }
    }
}

fn force_step(rule: &Rule, w: &mut TrajectoryWindow, t: usize, want: bool, rng: &mut Rng) -> bool {
    let p = rule.predicate;
    let specs = w.kind.feature_specs();
    match p.subject {
        Subject::Action => {
            let options: Vec<usize> = (0..w.kind.n_actions())
                .filter(|&a| p.op.holds(a as f32, p.value) == want)
                .collect();
            match options.as_slice().choose(rng) {
                Some(&a) => {
                    w.steps[t].action = Action(a);
                    true
                }
                None => false,
            }
        }
        Subject::Feature(j) => match pick_value(&specs[j], |v| p.op.holds(v, p.value) == want, p.value, rng) {
            Some(v) => {
                w.steps[t].state.features[j] = v;
                true
            }
            None => false,
        },
        Subject::FeatureDelta(j) => {
            if t == 0 {
                return false;
            }
            let prev = w.steps[t - 1].state.features[j];
            match pick_value(&specs[j], |v| p.op.holds(v - prev, p.value) == want, prev + p.value, rng) {
                Some(v) => {
                    w.steps[t].state.features[j] = v;
                    true
                }
                None => false,
            }
        }
    }
}

/// A value within `spec` accepted by `ok`, trying the boundary region
/// around `pivot` before random draws.
fn pick_value(spec: &FeatureSpec, ok: impl Fn(f32) -> bool, pivot: f32, rng: &mut Rng) -> Option<f32> {
    if spec.discrete {
        let options: Vec<f32> = (spec.lo as i64..=spec.hi as i64).map(|v| v as f32).filter(|&v| ok(v)).collect();
        return options.as_slice().choose(rng).copied();
    }
    let step = 1e-4 * (spec.hi - spec.lo);
    let probes = [pivot, pivot - step, pivot + step, spec.lo, spec.hi];
    for v in probes {
        let v = spec.clamp(v);
        if ok(v) {
            return Some(v);
        }
    }
    (0..64).map(|_| spec.sample(rng)).find(|&v| ok(v))
}

/// Augmented windows of one mark, all sharing its importance mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSet {
    /// Index of the source mark in the feedback batch.
    pub source: usize,
    pub mask: ImportanceMask,
    pub windows: Vec<TrajectoryWindow>,
}

/// The union of augmented sets for one iteration's feedback.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentedDataset {
    pub sets: Vec<AugmentedSet>,
}

impl AugmentedDataset {
    pub fn len(&self) -> usize {
        self.sets.iter().map(|s| s.windows.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn build_dataset(marks: &[MarkedTrajectory], cfg: &AugmentConfig, rng: &mut Rng) -> Result<AugmentedDataset> {
    let sets = marks
        .iter()
        .enumerate()
        .map(|(source, mt)| {
            Ok(AugmentedSet {
                source,
                mask: mask_from_explanation(&mt.explanation, &mt.window),
                windows: augment(mt, cfg, rng)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AugmentedDataset { sets })
}
