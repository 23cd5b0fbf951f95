//! Importance signatures: the values a mask declares important, used to
//! decide whether two windows show the same marked behavior.

use serde::{Deserialize, Serialize};

use crate::augment::ImportanceMask;
use crate::envs::EnvKind;
use crate::feedback::{evaluate_rule, ExplanationKind, Rule};
use crate::trajectory::{decode, TrajectoryWindow};

/// Matching tolerance for continuous important elements.
pub const EPSILON: f32 = 1e-3;

/// Continuous elements that take part in the hash key; the rest are
/// checked during verification only.
const KEYED_CONTINUOUS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSignature {
    pub kind: ExplanationKind,
    pub rule: Option<Rule>,
    pub actual_length: usize,
    /// Flat element positions (`step · (d + 1) + slot`, action slot last).
    pub positions: Vec<u32>,
    pub values: Vec<f32>,
    pub continuous: Vec<bool>,
}

/// Hash key: exact discrete values plus quantized continuous cells.
pub(crate) type SigKey = Vec<i64>;

impl ImportanceSignature {
    pub fn of(w: &TrajectoryWindow, mask: &ImportanceMask) -> Self {
        let d = w.kind.state_dim();
        let specs = w.kind.feature_specs();
        let mut sig = Self::empty(mask, w.actual_length);
        if let Some(rule) = &mask.rule {
            let holds = evaluate_rule(rule, w).unwrap_or(false);
            sig.values.push(if holds { 1.0 } else { 0.0 });
            sig.continuous.push(false);
            return sig;
        }
        for t in 0..mask.l.min(w.len()) {
            for (j, spec) in specs.iter().enumerate() {
                if mask.feature(t, j) {
                    sig.push((t * (d + 1) + j) as u32, w.steps[t].state.features[j], !spec.discrete);
                }
            }
            if mask.actions[t] {
                sig.push((t * (d + 1) + d) as u32, w.steps[t].action.0 as f32, false);
            }
        }
        sig
    }

    /// Same as [`ImportanceSignature::of`] on `decode(row)`, reading the
    /// encoded row directly unless a rule must be evaluated.
    pub fn of_encoded(env: EnvKind, l: usize, row: &[f32], mask: &ImportanceMask) -> Self {
        if mask.rule.is_some() {
            let w = decode(env, l, row).expect("row width matches buffer layout");
            return Self::of(&w, mask);
        }
        let specs = env.feature_specs();
        let d = specs.len();
        let stride = d + env.n_actions();
        let actual_length = (row[l * stride] * l as f32).round() as usize;
        let mut sig = Self::empty(mask, actual_length);
        for t in 0..l {
            let block = &row[t * stride..(t + 1) * stride];
            for (j, spec) in specs.iter().enumerate() {
                if mask.feature(t, j) {
                    sig.push((t * (d + 1) + j) as u32, spec.denormalize(block[j]), !spec.discrete);
                }
            }
            if mask.actions[t] {
                let action = block[d..]
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > block[d + best] { i } else { best });
                sig.push((t * (d + 1) + d) as u32, action as f32, false);
            }
        }
        sig
    }

    fn empty(mask: &ImportanceMask, actual_length: usize) -> Self {
        Self {
            kind: mask.kind,
            rule: mask.rule,
            actual_length,
            positions: Vec::new(),
            values: Vec::new(),
            continuous: Vec::new(),
        }
    }

    fn push(&mut self, position: u32, value: f32, continuous: bool) {
        self.positions.push(position);
        self.values.push(value);
        self.continuous.push(continuous);
    }

    /// Exact key for discrete elements and the first few continuous cells.
    pub(crate) fn key(&self) -> SigKey {
        let mut key = vec![self.actual_length as i64];
        let mut keyed = 0;
        for (&v, &c) in self.values.iter().zip(&self.continuous) {
            if !c {
                key.push(v as i64);
            } else if keyed < KEYED_CONTINUOUS {
                key.push(cell(v));
                keyed += 1;
            }
        }
        key
    }

    /// Every key a signature within `EPSILON` of this one can have.
    pub(crate) fn neighbour_keys(&self) -> Vec<SigKey> {
        let base = self.key();
        let mut slots = Vec::new();
        let mut keyed = 0;
        let mut pos = 1;
        for &c in &self.continuous {
            if !c {
                pos += 1;
            } else if keyed < KEYED_CONTINUOUS {
                slots.push(pos);
                pos += 1;
                keyed += 1;
            }
        }
        let mut keys = vec![base];
        for slot in slots {
            keys = keys
                .into_iter()
                .flat_map(|k| {
                    [-1i64, 0, 1].into_iter().map(move |delta| {
                        let mut k = k.clone();
                        k[slot] += delta;
                        k
                    })
                })
                .collect();
        }
        keys
    }
}

fn cell(v: f32) -> i64 {
    (v as f64 / EPSILON as f64).floor() as i64
}

/// Same explanation kind, rule, actual length and important positions;
/// discrete values equal and continuous values within [`EPSILON`].
pub fn similar(a: &ImportanceSignature, b: &ImportanceSignature) -> bool {
    a.kind == b.kind
        && a.rule == b.rule
        && a.actual_length == b.actual_length
        && a.positions == b.positions
        && a.continuous == b.continuous
        && a
            .values
            .iter()
            .zip(&b.values)
            .zip(&a.continuous)
            .all(|((&x, &y), &c)| if c { (x - y).abs() <= EPSILON } else { x == y })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::mask_from_explanation;
    use crate::envs::{Action, State, EGO_Y, TURN};
    use crate::feedback::Explanation;
    use crate::rng::{stream, Stream};
    use crate::trajectory::{clip_pad, encode, StepPair};
    use proptest::prelude::*;

    fn turns(first: Action) -> TrajectoryWindow {
        let mut steps: Vec<StepPair> = (0..5)
            .map(|i| StepPair::new(State::new(vec![i as f32, 0.0, 4.0, 4.0, 0.0]), TURN))
            .collect();
        steps[4].action = first;
        TrajectoryWindow {
            kind: EnvKind::GridWorld,
            steps,
            actual_length: 5,
        }
    }

    fn highway(ys: [f32; 5], actual_length: usize) -> TrajectoryWindow {
        TrajectoryWindow {
            kind: EnvKind::Highway,
            steps: ys
                .iter()
                .map(|&y| {
                    let mut f = vec![0.5; 25];
                    f[EGO_Y] = y;
                    StepPair::new(State::new(f), Action(1))
                })
                .collect(),
            actual_length,
        }
    }

    fn y_mask(w: &TrajectoryWindow) -> ImportanceMask {
        mask_from_explanation(&Explanation::Feature { feature_indices: vec![EGO_Y] }, w)
    }

    #[test]
    fn identical_turn_prefixes_match() {
        let e = Explanation::Action { mask: vec![true, true, true, true, false] };
        let (a, b) = (turns(TURN), turns(Action(0)));
        let mask = mask_from_explanation(&e, &a);
        assert!(similar(&ImportanceSignature::of(&a, &mask), &ImportanceSignature::of(&b, &mask)));
    }

    #[test]
    fn small_continuous_differences_match() {
        let a = highway([0.0, 1.0 / 3.0, 0.0, 1.0 / 3.0, 0.0], 5);
        let b = highway([0.0005, 1.0 / 3.0 + 0.0005, 0.0, 1.0 / 3.0 - 0.0005, 0.0], 5);
        let mask = y_mask(&a);
        let (sa, sb) = (ImportanceSignature::of(&a, &mask), ImportanceSignature::of(&b, &mask));
        assert!(similar(&sa, &sb));
        assert!(sa.neighbour_keys().contains(&sb.key()));
        let c = highway([0.003, 1.0 / 3.0, 0.0, 1.0 / 3.0, 0.0], 5);
        assert!(!similar(&sa, &ImportanceSignature::of(&c, &mask)));
    }

    #[test]
    fn actual_length_always_matters() {
        let a = highway([0.0; 5], 5);
        let b = highway([0.0; 5], 4);
        let mask = ImportanceMask::unexplained(EnvKind::Highway, 5);
        assert!(!similar(&ImportanceSignature::of(&a, &mask), &ImportanceSignature::of(&b, &mask)));
    }

    #[test]
    fn encoded_rows_give_the_same_signature() {
        let mut rng = stream(1, Stream::Buffer);
        for kind in EnvKind::ALL {
            let l = 5;
            let seg: Vec<StepPair> = (0..4).map(|_| StepPair::random(kind, &mut rng)).collect();
            let w = clip_pad(kind, &seg, l, &mut rng).unwrap();
            let explanations = [
                Explanation::Feature { feature_indices: vec![0] },
                Explanation::Action { mask: vec![true, false, true, true] },
                Explanation::Rule { rule: crate::feedback::Rule::frequent_orders() },
            ];
            for e in &explanations {
                let mask = mask_from_explanation(e, &w);
                let direct = ImportanceSignature::of(&w, &mask);
                let via_row = ImportanceSignature::of_encoded(kind, l, &encode(&w), &mask);
                assert_eq!(direct, via_row);
            }
        }
    }

    prop_compose! {
        fn signature()(ys in proptest::collection::vec(0.0f32..1.0, 5), jitter in proptest::collection::vec(-0.002f32..0.002, 5), len in 1usize..=5)
            -> (ImportanceSignature, ImportanceSignature) {
            let mut a = [0.0; 5];
            let mut b = [0.0; 5];
            for i in 0..5 {
                a[i] = ys[i];
                b[i] = (ys[i] + jitter[i]).clamp(0.0, 1.0);
            }
            let (wa, wb) = (highway(a, len), highway(b, len));
            let mask = y_mask(&wa);
            (ImportanceSignature::of(&wa, &mask), ImportanceSignature::of(&wb, &mask))
        }
    }

    proptest! {
        #[test]
        fn similarity_is_reflexive_and_symmetric((a, b) in signature()) {
            prop_assert!(similar(&a, &a));
            prop_assert_eq!(similar(&a, &b), similar(&b, &a));
            if similar(&a, &b) {
                prop_assert!(a.neighbour_keys().contains(&b.key()));
            }
        }
    }
}
