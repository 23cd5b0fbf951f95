use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::DqnConfig;
use crate::augment::AugmentConfig;
use crate::envs::EnvKind;
use crate::error::{ItersError, Result};
use crate::shaping::FitConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackMode {
    Simulated,
    Human,
}

impl FromStr for FeedbackMode {
    type Err = ItersError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim" | "simulated" => Ok(Self::Simulated),
            "human" => Ok(Self::Human),
            other => Err(ItersError::config("feedback_mode", format!("expected sim or human, got `{other}`"))),
        }
    }
}

/// `Full` uses the reference parameter table; `Desk` halves `k` so a run fits
/// on a laptop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    Desk,
}

impl FromStr for Scale {
    type Err = ItersError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "desk" => Ok(Self::Desk),
            other => Err(ItersError::config("scale", format!("expected full or desk, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItersConfig {
    pub env: EnvKind,
    pub scale: Scale,
    /// Weight of the learned penalty in the shaped reward.
    pub lambda: f32,
    /// Training steps per iteration.
    pub k: u64,
    /// Number of iterations.
    pub n: usize,
    /// Summary episodes shown per checkpoint.
    pub m: usize,
    /// Window length.
    pub l: usize,
    /// Augmented windows per mark.
    pub p: usize,
    pub noise_mean: f32,
    pub noise_std: f32,
    /// Rejection-sampling attempts per augmented window for rule explanations.
    pub max_rejection_attempts: usize,
    /// Maximum number of baseline windows seeding the feedback buffer.
    pub baseline_cap: usize,
    /// Baseline rollouts the seed windows are drawn from.
    pub baseline_rollouts: usize,
    /// Exploration rate of the seed rollouts. It is higher than the summary
    /// rate so the zero-mark seed also covers behavior the user never marks.
    pub baseline_epsilon: f32,
    /// Episodes unrolled per checkpoint before picking the top `m`.
    pub summary_episodes: usize,
    pub summary_epsilon: f32,
    pub eval_episodes: usize,
    pub feedback_mode: FeedbackMode,
    pub seeds: Vec<u64>,
    pub run_dir: Option<PathBuf>,
    /// Continue from the newest checkpoint in `run_dir` instead of starting over.
    pub resume: bool,
    /// Write real per-iteration timings to `metrics.csv`; off keeps the file
    /// byte-identical across reruns.
    pub record_wall_clock: bool,
    pub dqn: DqnConfig,
    pub fit: FitConfig,
}

impl ItersConfig {
    pub fn defaults(env: EnvKind, scale: Scale) -> Self {
        let (k, n, l) = match env {
            EnvKind::GridWorld => (20_000, 50, 5),
            EnvKind::Highway => (10_000, 50, 5),
            EnvKind::Inventory => (10_000, 30, 7),
        };
        let p = match (env, scale) {
            // keeps the buffer within a few hundred MB over a long run
            (EnvKind::Highway, Scale::Desk) => 1_000,
            _ => 10_000,
        };
        Self {
            env,
            scale,
            lambda: 0.1,
            k: if scale == Scale::Desk { k / 2 } else { k },
            n,
            m: 10,
            l,
            p,
            noise_mean: 0.0,
            noise_std: 0.001,
            max_rejection_attempts: 100,
            baseline_cap: 5_000,
            baseline_rollouts: 200,
            baseline_epsilon: 0.5,
            summary_episodes: 20,
            summary_epsilon: 0.05,
            eval_episodes: 100,
            feedback_mode: FeedbackMode::Simulated,
            seeds: vec![0],
            run_dir: None,
            resume: false,
            record_wall_clock: false,
            dqn: DqnConfig::for_env(env),
            fit: FitConfig::default(),
        }
    }

    /// Defaults for the file's `env` and `scale`, overlaid with every other
    /// key the file sets. Nested objects merge key by key.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: Value = serde_json::from_str(text).map_err(|e| ItersError::config("config", e.to_string()))?;
        let Value::Object(_) = file else {
            return Err(ItersError::config("config", "expected a JSON object"));
        };
        let env = match file.get("env") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| ItersError::config("env", e.to_string()))?,
            None => EnvKind::GridWorld,
        };
        let scale = match file.get("scale") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| ItersError::config("scale", e.to_string()))?,
            None => Scale::Full,
        };
        let mut merged = serde_json::to_value(Self::defaults(env, scale)).expect("config serializes");
        overlay(&mut merged, file);
        serde_json::from_value(merged).map_err(|e| ItersError::config("config", e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            p: self.p,
            noise_mean: self.noise_mean,
            noise_std: self.noise_std,
            max_rejection_attempts: self.max_rejection_attempts,
        }
    }

    /// Steps given to each baseline agent: the same budget as a full run
    /// (one iteration's worth when `n` is 0).
    pub fn baseline_budget(&self) -> u64 {
        self.k * self.n.max(1) as u64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(ItersError::config("lambda", format!("must be a finite value >= 0, got {}", self.lambda)));
        }
        let positive = [
            ("k", self.k as usize),
            ("m", self.m),
            ("l", self.l),
            ("p", self.p),
            ("baseline_cap", self.baseline_cap),
            ("baseline_rollouts", self.baseline_rollouts),
            ("summary_episodes", self.summary_episodes),
            ("eval_episodes", self.eval_episodes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(ItersError::config(field, "must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.baseline_epsilon) {
            return Err(ItersError::config("baseline_epsilon", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.summary_epsilon) {
            return Err(ItersError::config("summary_epsilon", "must lie in [0, 1]"));
        }
        if self.seeds.is_empty() {
            return Err(ItersError::config("seeds", "needs at least one seed"));
        }
        if self.resume && self.run_dir.is_none() {
            return Err(ItersError::config("resume", "requires run_dir"));
        }
        self.augment_config().validate()?;
        self.dqn.validate()?;
        self.fit.validate()
    }
}

fn overlay(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (key, v) in p {
                match b.get_mut(&key) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(key, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_defaults() {
        let g = ItersConfig::defaults(EnvKind::GridWorld, Scale::Full);
        assert_eq!((g.k, g.n, g.m, g.l, g.p), (20_000, 50, 10, 5, 10_000));
        let h = ItersConfig::defaults(EnvKind::Highway, Scale::Full);
        assert_eq!((h.k, h.n, h.m, h.l, h.p), (10_000, 50, 10, 5, 10_000));
        assert_eq!((h.noise_mean, h.noise_std), (0.0, 0.001));
        let i = ItersConfig::defaults(EnvKind::Inventory, Scale::Full);
        assert_eq!((i.k, i.n, i.m, i.l, i.p), (10_000, 30, 10, 7, 10_000));
    }

    #[test]
    fn desk_scale_halves_k() {
        assert_eq!(ItersConfig::defaults(EnvKind::GridWorld, Scale::Desk).k, 10_000);
        assert_eq!(ItersConfig::defaults(EnvKind::Inventory, Scale::Desk).k, 5_000);
        assert_eq!(ItersConfig::defaults(EnvKind::Highway, Scale::Desk).k, 5_000);
    }

    #[test]
    fn negative_lambda_names_field() {
        let mut cfg = ItersConfig::defaults(EnvKind::GridWorld, Scale::Full);
        cfg.lambda = -1.0;
        match cfg.validate() {
            Err(ItersError::Config { field, .. }) => assert_eq!(field, "lambda"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn json_overlays_defaults() {
        let cfg = ItersConfig::from_json(r#"{"env":"inventory","scale":"desk","lambda":0.5,"fit":{"epochs":3}}"#).unwrap();
        assert_eq!(cfg.env, EnvKind::Inventory);
        assert_eq!(cfg.k, 5_000);
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.fit.epochs, 3);
        assert_eq!(cfg.fit.batch, 256);
        assert_eq!(cfg.dqn.reward_scale, 0.01);
    }

    #[test]
    fn json_round_trip() {
        let cfg = ItersConfig::defaults(EnvKind::Highway, Scale::Desk);
        assert_eq!(ItersConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn bad_json_is_config_error() {
        assert!(matches!(ItersConfig::from_json("[1]"), Err(ItersError::Config { .. })));
        assert!(matches!(ItersConfig::from_json(r#"{"env":"mars"}"#), Err(ItersError::Config { .. })));
    }
}
