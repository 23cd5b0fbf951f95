//! Fixed-length trajectory windows: the unit of feedback, augmentation and
//! reward-model input.

use serde::{Deserialize, Serialize};

use crate::envs::{Action, EnvKind, State, Transition};
use crate::error::{ItersError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPair {
    pub state: State,
    pub action: Action,
}

impl StepPair {
    pub fn new(state: State, action: Action) -> Self {
        Self { state, action }
    }

    pub fn random(kind: EnvKind, rng: &mut Rng) -> Self {
        Self {
            state: kind.random_state(rng),
            action: kind.random_action(rng),
        }
    }
}

/// Exactly `l` steps, of which the first `actual_length` are real.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWindow {
    pub kind: EnvKind,
    pub steps: Vec<StepPair>,
    pub actual_length: usize,
}

impl TrajectoryWindow {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// The non-padded prefix.
    pub fn active(&self) -> &[StepPair] {
        &self.steps[..self.actual_length]
    }
}

/// One rollout from reset to done (or horizon).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub kind: EnvKind,
    pub transitions: Vec<Transition>,
    /// Return under the reward used while collecting.
    pub ret: f32,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn pairs(&self) -> Vec<StepPair> {
        self.transitions
            .iter()
            .map(|t| StepPair::new(t.state.clone(), t.action))
            .collect()
    }
}

/// Clips a segment to its first `l` steps or pads it with random steps.
pub fn clip_pad(kind: EnvKind, segment: &[StepPair], l: usize, rng: &mut Rng) -> Result<TrajectoryWindow> {
    if segment.is_empty() {
        return Err(ItersError::domain("cannot build a window from an empty segment"));
    }
    if l == 0 {
        return Err(ItersError::domain("window length must be at least 1"));
    }
    let actual_length = segment.len().min(l);
    let mut steps: Vec<StepPair> = segment[..actual_length].to_vec();
    while steps.len() < l {
        steps.push(StepPair::random(kind, rng));
    }
    Ok(TrajectoryWindow {
        kind,
        steps,
        actual_length,
    })
}

/// Length of [`encode`]'s output for a kind and window length.
pub fn encoded_dim(kind: EnvKind, l: usize) -> usize {
    l * (kind.state_dim() + kind.n_actions()) + 1
}

/// Flattens a window: per step the normalized state followed by a one-hot
/// action, then `actual_length / l` in the last slot.
pub fn encode(w: &TrajectoryWindow) -> Vec<f32> {
    let mut out = vec![0.0; encoded_dim(w.kind, w.len())];
    encode_into(w, &mut out);
    out
}

pub fn encode_into(w: &TrajectoryWindow, out: &mut [f32]) {
    let specs = w.kind.feature_specs();
    let n_actions = w.kind.n_actions();
    let stride = specs.len() + n_actions;
    debug_assert_eq!(out.len(), w.len() * stride + 1);
    for (i, step) in w.steps.iter().enumerate() {
        let block = &mut out[i * stride..(i + 1) * stride];
        for (j, spec) in specs.iter().enumerate() {
            block[j] = spec.normalize(step.state.features[j]);
        }
        for slot in &mut block[specs.len()..] {
            *slot = 0.0;
        }
        block[specs.len() + step.action.0] = 1.0;
    }
    out[w.len() * stride] = w.actual_length as f32 / w.len() as f32;
}

/// Inverse of [`encode`] up to floating point in continuous features.
pub fn decode(kind: EnvKind, l: usize, encoded: &[f32]) -> Result<TrajectoryWindow> {
    if encoded.len() != encoded_dim(kind, l) {
        return Err(ItersError::domain(format!(
            "encoded length {} does not match {} with l = {l}",
            encoded.len(),
            kind
        )));
    }
    let specs = kind.feature_specs();
    let stride = specs.len() + kind.n_actions();
    let steps = (0..l)
        .map(|i| {
            let block = &encoded[i * stride..(i + 1) * stride];
            let features = specs
                .iter()
                .enumerate()
                .map(|(j, spec)| spec.denormalize(block[j]))
                .collect();
            StepPair::new(State::new(features), Action(argmax(&block[specs.len()..])))
        })
        .collect();
    let actual_length = (encoded[l * stride] * l as f32).round() as usize;
    Ok(TrajectoryWindow {
        kind,
        steps,
        actual_length,
    })
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Contiguous segments starting at `0, stride, 2·stride, …`, each of length
/// `min(l, remaining)`. Scanning stops at the first segment that reaches the
/// end of the sequence, so later starts (which would be suffixes of it) are
/// not emitted.
pub fn sliding_windows<T>(items: &[T], l: usize, stride: usize) -> Result<Vec<(usize, &[T])>> {
    if stride == 0 {
        return Err(ItersError::domain("stride must be at least 1"));
    }
    if l == 0 {
        return Err(ItersError::domain("window length must be at least 1"));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start < items.len() {
        let end = (start + l).min(items.len());
        out.push((start, &items[start..end]));
        if end == items.len() {
            break;
        }
        start += stride;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Env;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    fn grid_segment(n: usize) -> Vec<StepPair> {
        (0..n)
            .map(|i| StepPair::new(State::new(vec![i as f32 % 5.0, 0.0, 4.0, 4.0, 1.0]), Action(1)))
            .collect()
    }

    #[test]
    fn pads_short_segments() {
        let mut rng = stream(1, Stream::Padding);
        let w = clip_pad(EnvKind::GridWorld, &grid_segment(4), 5, &mut rng).unwrap();
        assert_eq!(w.len(), 5);
        assert_eq!(w.actual_length, 4);
        assert_eq!(&w.steps[..4], &grid_segment(4)[..]);
        for (v, spec) in w.steps[4].state.features.iter().zip(EnvKind::GridWorld.feature_specs()) {
            assert!(spec.contains(*v));
        }
    }

    #[test]
    fn exact_length_is_identity() {
        let mut rng = stream(1, Stream::Padding);
        let seg = grid_segment(5);
        let w = clip_pad(EnvKind::GridWorld, &seg, 5, &mut rng).unwrap();
        assert_eq!(w.steps, seg);
        assert_eq!(w.actual_length, 5);
        let again = clip_pad(EnvKind::GridWorld, &w.steps, 5, &mut rng).unwrap();
        assert_eq!(again, w);
    }

    #[test]
    fn clips_long_segments_to_head() {
        let mut rng = stream(1, Stream::Padding);
        let seg = grid_segment(7);
        let w = clip_pad(EnvKind::GridWorld, &seg, 5, &mut rng).unwrap();
        assert_eq!(w.steps, seg[..5].to_vec());
        assert_eq!(w.actual_length, 5);
    }

    #[test]
    fn empty_segment_rejected() {
        let mut rng = stream(1, Stream::Padding);
        assert!(clip_pad(EnvKind::GridWorld, &[], 5, &mut rng).is_err());
    }

    #[test]
    fn encoded_dimensions() {
        assert_eq!(encoded_dim(EnvKind::GridWorld, 5), 36);
        assert_eq!(encoded_dim(EnvKind::Highway, 5), 151);
        assert_eq!(encoded_dim(EnvKind::Inventory, 7), 57);
    }

    #[test]
    fn actual_length_only_touches_last_slot() {
        let mut rng = stream(2, Stream::Padding);
        let w = clip_pad(EnvKind::GridWorld, &grid_segment(5), 5, &mut rng).unwrap();
        let mut shorter = w.clone();
        shorter.actual_length = 3;
        let (a, b) = (encode(&w), encode(&shorter));
        let diff: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        assert_eq!(diff, vec![a.len() - 1]);
    }

    #[test]
    fn window_counts() {
        let items: Vec<usize> = (0..14).collect();
        let full = sliding_windows(&items, 7, 1).unwrap();
        assert_eq!(full.len(), 8);
        assert!(full.iter().all(|(_, s)| s.len() == 7));

        let short: Vec<usize> = (0..3).collect();
        let single = sliding_windows(&short, 5, 1).unwrap();
        assert_eq!(single, vec![(0, &short[..])]);

        let ten: Vec<usize> = (0..10).collect();
        let tiles = sliding_windows(&ten, 5, 5).unwrap();
        assert_eq!(tiles.iter().map(|(s, _)| *s).collect::<Vec<_>>(), vec![0, 5]);

        assert!(sliding_windows(&ten, 5, 0).is_err());
    }

    fn random_window(kind: EnvKind, l: usize, len: usize, seed: u64) -> TrajectoryWindow {
        let mut rng = stream(seed, Stream::Padding);
        let mut env = Env::new(kind);
        let mut state = env.reset(&mut rng);
        let mut seg = Vec::new();
        for _ in 0..len {
            let a = kind.random_action(&mut rng);
            let t = env.step(a, &mut rng).unwrap();
            seg.push(StepPair::new(state, a));
            state = t.next_state;
            if t.done {
                break;
            }
        }
        clip_pad(kind, &seg, l, &mut rng).unwrap()
    }

    proptest! {
        #[test]
        fn encode_dimension_constant(seed in 0u64..10_000, len in 1usize..9, k in 0usize..3) {
            let kind = EnvKind::ALL[k];
            let l = if kind == EnvKind::Inventory { 7 } else { 5 };
            let w = random_window(kind, l, len, seed);
            prop_assert_eq!(encode(&w).len(), encoded_dim(kind, l));
        }

        #[test]
        fn decode_recovers_actions_and_discrete_states(seed in 0u64..10_000, len in 1usize..9, k in 0usize..3) {
            let kind = EnvKind::ALL[k];
            let l = if kind == EnvKind::Inventory { 7 } else { 5 };
            let w = random_window(kind, l, len, seed);
            let back = decode(kind, l, &encode(&w)).unwrap();
            prop_assert_eq!(back.actual_length, w.actual_length);
            for (a, b) in back.steps.iter().zip(&w.steps) {
                prop_assert_eq!(a.action, b.action);
                if kind != EnvKind::Highway {
                    prop_assert_eq!(&a.state, &b.state);
                }
            }
        }
    }
}
