//! User feedback: marked trajectory windows with explanations, and the
//! simulated users that produce them during evaluation runs.

mod rule;
mod simulate;

pub use rule::{evaluate_rule, Comparator, Predicate, PredicateOp, Rule, Subject};
pub use simulate::{four_turn_starts, simulate_feedback};

use serde::{Deserialize, Serialize};

use crate::envs::{lane_of, EnvKind, EGO_Y};
use crate::error::{ItersError, Result};
use crate::trajectory::TrajectoryWindow;

/// Why the user marked a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Explanation {
    /// These state features caused the mark.
    Feature { feature_indices: Vec<usize> },
    /// Per-step flags over the marked range; set steps hold important actions.
    Action { mask: Vec<bool> },
    /// Windows satisfying the rule are unwanted.
    Rule { rule: Rule },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationKind {
    /// No feedback yet: only the actual length is compared.
    Unexplained,
    Feature,
    Action,
    Rule,
}

impl Explanation {
    pub fn kind(&self) -> ExplanationKind {
        match self {
            Explanation::Feature { .. } => ExplanationKind::Feature,
            Explanation::Action { .. } => ExplanationKind::Action,
            Explanation::Rule { .. } => ExplanationKind::Rule,
        }
    }

    /// Checks the explanation against the window it explains.
    pub fn validate(&self, w: &TrajectoryWindow) -> Result<()> {
        match self {
            Explanation::Feature { feature_indices } => {
                if feature_indices.is_empty() {
                    return Err(ItersError::domain("feature explanation names no features"));
                }
                if let Some(bad) = feature_indices.iter().find(|&&i| i >= w.kind.state_dim()) {
                    return Err(ItersError::domain(format!(
                        "feature index {bad} out of range for {} ({} features)",
                        w.kind,
                        w.kind.state_dim()
                    )));
                }
                Ok(())
            }
            Explanation::Action { mask } => {
                if mask.len() != w.actual_length {
                    return Err(ItersError::domain(format!(
                        "action mask has {} entries but the marked range has {} steps",
                        mask.len(),
                        w.actual_length
                    )));
                }
                if !mask.iter().any(|&m| m) {
                    return Err(ItersError::domain("action mask marks no step"));
                }
                Ok(())
            }
            Explanation::Rule { rule } => rule.validate(w.kind),
        }
    }
}

/// Where in the checkpoint summaries a mark came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkSource {
    pub episode: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkedTrajectory {
    pub window: TrajectoryWindow,
    pub explanation: Explanation,
    pub source: MarkSource,
}

impl MarkedTrajectory {
    pub fn validate(&self, l: usize) -> Result<()> {
        let MarkSource { start, end, .. } = self.source;
        if end < start {
            return Err(ItersError::domain(format!("marked range ends ({end}) before it starts ({start})")));
        }
        let span = end - start + 1;
        if span != self.window.actual_length {
            return Err(ItersError::domain(format!(
                "marked range spans {span} steps but the window records {}",
                self.window.actual_length
            )));
        }
        if span > l || self.window.len() != l {
            return Err(ItersError::domain(format!("marked range of {span} steps exceeds l = {l}")));
        }
        self.explanation.validate(&self.window)
    }
}

/// Number of consecutive step pairs (within `actual_length`) whose lane differs.
pub fn detect_lane_changes(w: &TrajectoryWindow) -> Result<usize> {
    if w.kind != EnvKind::Highway {
        return Err(ItersError::domain(format!("lane changes are undefined for {}", w.kind)));
    }
    Ok(count_lane_changes(
        w.active().iter().map(|s| lane_of(s.state.features[EGO_Y])),
    ))
}

pub(crate) fn count_lane_changes(lanes: impl Iterator<Item = i32>) -> usize {
    let mut prev = None;
    let mut changes = 0;
    for lane in lanes {
        if prev.is_some_and(|p| p != lane) {
            changes += 1;
        }
        prev = Some(lane);
    }
    changes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Action, State};
    use crate::trajectory::StepPair;

    pub(crate) fn highway_window(lanes: &[i32]) -> TrajectoryWindow {
        TrajectoryWindow {
            kind: EnvKind::Highway,
            steps: lanes
                .iter()
                .map(|&lane| {
                    let mut f = vec![0.0; 25];
                    f[0] = 1.0;
                    f[EGO_Y] = lane as f32 / 3.0;
                    StepPair::new(State::new(f), Action(1))
                })
                .collect(),
            actual_length: lanes.len(),
        }
    }

    /// Brute force over explicit lane indices.
    fn oracle(lanes: &[i32]) -> usize {
        lanes.windows(2).filter(|p| p[0] != p[1]).count()
    }

    #[test]
    fn lane_change_counts() {
        for lanes in [[1, 1, 2, 2, 3], [2, 2, 2, 2, 2], [0, 1, 0, 1, 0]] {
            assert_eq!(detect_lane_changes(&highway_window(&lanes)).unwrap(), oracle(&lanes));
        }
        assert_eq!(detect_lane_changes(&highway_window(&[1, 1, 2, 2, 3])).unwrap(), 2);
        assert_eq!(detect_lane_changes(&highway_window(&[0, 1, 0, 1, 0])).unwrap(), 4);
    }

    #[test]
    fn lane_changes_respect_actual_length() {
        let mut w = highway_window(&[0, 1, 0, 1, 0]);
        w.actual_length = 3;
        assert_eq!(detect_lane_changes(&w).unwrap(), 2);
    }

    #[test]
    fn lane_changes_need_highway() {
        let w = TrajectoryWindow {
            kind: EnvKind::GridWorld,
            steps: vec![StepPair::new(State::new(vec![0.0; 5]), Action(0))],
            actual_length: 1,
        };
        assert!(detect_lane_changes(&w).is_err());
    }

    #[test]
    fn marked_range_must_match_length() {
        let w = highway_window(&[0, 1, 0, 1, 0]);
        let mut mark = MarkedTrajectory {
            window: w,
            explanation: Explanation::Feature { feature_indices: vec![EGO_Y] },
            source: MarkSource { episode: 0, start: 3, end: 7 },
        };
        assert!(mark.validate(5).is_ok());
        mark.source.end = 8;
        assert!(mark.validate(5).is_err());
        mark.explanation = Explanation::Feature { feature_indices: vec![25] };
        mark.source.end = 7;
        assert!(mark.validate(5).is_err());
    }

    #[test]
    fn explanation_json_shape() {
        let e = Explanation::Action { mask: vec![true, false] };
        let json = serde_json::to_string(&e).unwrap();
        assert_eq!(json, r#"{"type":"action","mask":[true,false]}"#);
        let back: Explanation = serde_json::from_str(&json).unwrap();
        assert_eq!(back, e);
    }
}
