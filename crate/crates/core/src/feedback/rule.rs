//! Single-COUNT rule language: `COUNT(predicate) <cmp> threshold`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::envs::EnvKind;
use crate::error::{ItersError, Result};
use crate::trajectory::TrajectoryWindow;

/// What a per-step predicate looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", content = "index", rename_all = "snake_case")]
pub enum Subject {
    Feature(usize),
    Action,
    /// `feature(s_t) - feature(s_{t-1})`, defined from the second step on.
    FeatureDelta(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicateOp {
    Eq,
    Ne,
    Lt,
    Gt,
}

impl PredicateOp {
    pub fn holds(self, lhs: f32, rhs: f32) -> bool {
        match self {
            PredicateOp::Eq => lhs == rhs,
            PredicateOp::Ne => lhs != rhs,
            PredicateOp::Lt => lhs < rhs,
            PredicateOp::Gt => lhs > rhs,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            PredicateOp::Eq => "=",
            PredicateOp::Ne => "!=",
            PredicateOp::Lt => "<",
            PredicateOp::Gt => ">",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub subject: Subject,
    pub op: PredicateOp,
    pub value: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    Gt,
    Lt,
    Ge,
    Le,
}

impl Comparator {
    pub fn holds(self, count: u32, threshold: u32) -> bool {
        match self {
            Comparator::Gt => count > threshold,
            Comparator::Lt => count < threshold,
            Comparator::Ge => count >= threshold,
            Comparator::Le => count <= threshold,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Comparator::Gt => ">",
            Comparator::Lt => "<",
            Comparator::Ge => ">=",
            Comparator::Le => "<=",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub predicate: Predicate,
    pub comparator: Comparator,
    pub threshold: u32,
}

impl Rule {
    /// `COUNT(ACTION > 0) > 5`: more than five deliveries in a window.
    pub fn frequent_orders() -> Self {
        Rule {
            predicate: Predicate {
                subject: Subject::Action,
                op: PredicateOp::Gt,
                value: 0.0,
            },
            comparator: Comparator::Gt,
            threshold: 5,
        }
    }

    /// `COUNT(v(s_t) != v(s_{t-1})) > c_max` over a feature.
    pub fn feature_changes(feature: usize, c_max: u32) -> Self {
        Rule {
            predicate: Predicate {
                subject: Subject::FeatureDelta(feature),
                op: PredicateOp::Ne,
                value: 0.0,
            },
            comparator: Comparator::Gt,
            threshold: c_max,
        }
    }

    pub fn validate(&self, kind: EnvKind) -> Result<()> {
        match self.predicate.subject {
            Subject::Feature(i) | Subject::FeatureDelta(i) if i >= kind.state_dim() => Err(ItersError::domain(format!(
                "rule `{self}` references feature {i}, but {kind} states have {} features",
                kind.state_dim()
            ))),
            _ if !self.predicate.value.is_finite() => {
                Err(ItersError::domain(format!("rule `{self}` has a non-finite predicate value")))
            }
            _ => Ok(()),
        }
    }

    /// Whether step `t` of the window satisfies the predicate. Delta
    /// predicates are never satisfied at `t = 0`.
    pub fn step_satisfies(&self, w: &TrajectoryWindow, t: usize) -> bool {
        let p = &self.predicate;
        match p.subject {
            Subject::Feature(i) => p.op.holds(w.steps[t].state.features[i], p.value),
            Subject::Action => p.op.holds(w.steps[t].action.0 as f32, p.value),
            Subject::FeatureDelta(i) => {
                t > 0 && p.op.holds(w.steps[t].state.features[i] - w.steps[t - 1].state.features[i], p.value)
            }
        }
    }

    /// Number of steps within `actual_length` satisfying the predicate.
    pub fn count(&self, w: &TrajectoryWindow) -> u32 {
        (0..w.actual_length).filter(|&t| self.step_satisfies(w, t)).count() as u32
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.predicate;
        let subject = match p.subject {
            Subject::Feature(i) => format!("FEATURE[{i}]"),
            Subject::Action => "ACTION".to_string(),
            Subject::FeatureDelta(i) => format!("DELTA(FEATURE[{i}])"),
        };
        write!(
            f,
            "COUNT({subject} {} {}) {} {}",
            p.op.symbol(),
            p.value,
            self.comparator.symbol(),
            self.threshold
        )
    }
}

/// Evaluates the rule over the first `actual_length` steps of a window.
pub fn evaluate_rule(rule: &Rule, w: &TrajectoryWindow) -> Result<bool> {
    rule.validate(w.kind)?;
    Ok(rule.comparator.holds(rule.count(w), rule.threshold))
}
