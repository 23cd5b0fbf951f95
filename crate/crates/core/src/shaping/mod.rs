//! The feedback buffer `B` with its mark counts `M`, and the reward-shaping
//! regressor trained on it.

mod model;
mod signature;

pub use model::{fit_reward_model, predict_penalty, FitConfig, FitReport, RewardModel};
pub use signature::{similar, ImportanceSignature, EPSILON};

use std::collections::HashMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentedDataset, ImportanceMask};
use crate::envs::EnvKind;
use crate::error::{ItersError, Result};
use crate::rng::Rng;
use crate::trajectory::{clip_pad, encode_into, encoded_dim, sliding_windows, Episode};
use signature::SigKey;

/// Encoded windows with their mark counts and the mask each was recorded
/// under. Rows are stored contiguously.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackBuffer {
    env: EnvKind,
    l: usize,
    dim: usize,
    data: Vec<f32>,
    marks: Vec<u32>,
    /// Distinct masks seen so far; index 0 is the unexplained mask.
    masks: Vec<ImportanceMask>,
    entry_mask: Vec<u32>,
    /// `(mask id, own signature key)` to entry indices.
    #[serde(skip)]
    signature_index: HashMap<(u32, SigKey), Vec<usize>>,
    merges: usize,
}

/// What one [`FeedbackBuffer::merge_feedback`] call changed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeReport {
    pub appended: usize,
    /// Prior entries whose mark went up by one.
    pub incremented: usize,
    /// Appended windows that matched an earlier entry.
    pub matched: usize,
    pub max_mark: u32,
}

/// Entries appended since some length, plus the full mark array; enough to
/// rebuild a buffer from a chain of checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BufferDelta {
    pub from: usize,
    pub rows: Vec<f32>,
    pub entry_mask: Vec<u32>,
    pub masks: Vec<ImportanceMask>,
    pub marks: Vec<u32>,
    pub merges: usize,
}

/// Prior entries grouped by identical projected signature.
struct Projection {
    mask: ImportanceMask,
    groups: Vec<(ImportanceSignature, Vec<usize>)>,
    by_key: HashMap<SigKey, Vec<usize>>,
}

impl Projection {
    fn build(buf: &FeedbackBuffer, n: usize, mask: &ImportanceMask) -> Self {
        let mut exact: HashMap<(SigKey, Vec<u32>), usize> = HashMap::new();
        let mut groups: Vec<(ImportanceSignature, Vec<usize>)> = Vec::new();
        let mut by_key: HashMap<SigKey, Vec<usize>> = HashMap::new();
        for i in 0..n {
            let sig = ImportanceSignature::of_encoded(buf.env, buf.l, buf.row(i), mask);
            let key = sig.key();
            let bits = sig.values.iter().map(|v| v.to_bits()).collect();
            match exact.entry((key.clone(), bits)) {
                std::collections::hash_map::Entry::Occupied(g) => groups[*g.get()].1.push(i),
                std::collections::hash_map::Entry::Vacant(v) => {
                    v.insert(groups.len());
                    by_key.entry(key).or_default().push(groups.len());
                    groups.push((sig, vec![i]));
                }
            }
        }
        Self {
            mask: mask.clone(),
            groups,
            by_key,
        }
    }

    /// Groups similar to `sig`.
    fn matches(&self, sig: &ImportanceSignature) -> Vec<usize> {
        let mut out = Vec::new();
        for key in sig.neighbour_keys() {
            if let Some(ids) = self.by_key.get(&key) {
                out.extend(ids.iter().copied().filter(|&g| similar(sig, &self.groups[g].0)));
            }
        }
        out
    }
}

impl FeedbackBuffer {
    fn empty(env: EnvKind, l: usize) -> Self {
        Self {
            env,
            l,
            dim: encoded_dim(env, l),
            data: Vec::new(),
            marks: Vec::new(),
            masks: vec![ImportanceMask::unexplained(env, l)],
            entry_mask: Vec::new(),
            signature_index: HashMap::new(),
            merges: 0,
        }
    }

    /// Stride-1 windows from the baseline's rollouts, subsampled to `cap`,
    /// all with mark 0.
    pub fn init(rollouts: &[Episode], l: usize, cap: usize, rng: &mut Rng) -> Result<Self> {
        let first = rollouts
            .first()
            .ok_or_else(|| ItersError::domain("cannot seed the feedback buffer without rollouts"))?;
        if cap == 0 {
            return Err(ItersError::domain("buffer cap must be at least 1"));
        }
        let env = first.kind;
        let pairs: Vec<_> = rollouts.iter().map(Episode::pairs).collect();
        let mut spans = Vec::new();
        for (e, p) in pairs.iter().enumerate() {
            for (start, seg) in sliding_windows(p, l, 1)? {
                spans.push((e, start, seg.len()));
            }
        }
        if spans.is_empty() {
            return Err(ItersError::domain("rollouts contain no steps"));
        }
        let mut chosen: Vec<usize> = if spans.len() > cap {
            index::sample(rng, spans.len(), cap).into_vec()
        } else {
            (0..spans.len()).collect()
        };
        chosen.sort_unstable();
        let mut buf = Self::empty(env, l);
        buf.data.reserve(chosen.len() * buf.dim);
        for i in chosen {
            let (e, start, len) = spans[i];
            let w = clip_pad(env, &pairs[e][start..start + len], l, rng)?;
            buf.push_row(|row| encode_into(&w, row), 0, 0);
        }
        Ok(buf)
    }

    fn push_row(&mut self, fill: impl FnOnce(&mut [f32]), mark: u32, mask_id: u32) {
        let start = self.data.len();
        self.data.resize(start + self.dim, 0.0);
        fill(&mut self.data[start..]);
        let i = self.marks.len();
        self.marks.push(mark);
        self.entry_mask.push(mask_id);
        self.index_entry(i);
    }

    fn index_entry(&mut self, i: usize) {
        let m = self.entry_mask[i];
        let sig = ImportanceSignature::of_encoded(self.env, self.l, self.row(i), &self.masks[m as usize]);
        self.signature_index.entry((m, sig.key())).or_default().push(i);
    }

    pub fn env(&self) -> EnvKind {
        self.env
    }

    pub fn window_len(&self) -> usize {
        self.l
    }

    /// Width of an encoded row.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }

    pub fn marks(&self) -> &[u32] {
        &self.marks
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Number of non-empty merges so far.
    pub fn merges(&self) -> usize {
        self.merges
    }

    pub fn has_feedback(&self) -> bool {
        self.merges > 0
    }

    /// The entry's signature under the mask it was recorded with.
    pub fn signature(&self, i: usize) -> ImportanceSignature {
        ImportanceSignature::of_encoded(self.env, self.l, self.row(i), &self.masks[self.entry_mask[i] as usize])
    }

    /// Entries recorded under `mask` whose own signature is similar to `sig`.
    pub fn lookup(&self, sig: &ImportanceSignature, mask: &ImportanceMask) -> Vec<usize> {
        let Some(m) = self.masks.iter().position(|x| x == mask) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for key in sig.neighbour_keys() {
            if let Some(ids) = self.signature_index.get(&(m as u32, key)) {
                out.extend(ids.iter().copied().filter(|&i| similar(sig, &self.signature(i))));
            }
        }
        out.sort_unstable();
        out
    }

    fn mask_id(&mut self, mask: &ImportanceMask) -> u32 {
        match self.masks.iter().position(|m| m == mask) {
            Some(i) => i as u32,
            None => {
                self.masks.push(mask.clone());
                (self.masks.len() - 1) as u32
            }
        }
    }

    /// Appends an iteration's augmented windows. Each new window's mark is
    /// one more than the highest mark among similar prior entries (1 if none);
    /// each similar prior entry gains one mark, once per merge. Similarity is
    /// judged under the new window's mask.
    pub fn merge_feedback(&mut self, ds: &AugmentedDataset) -> Result<MergeReport> {
        let n0 = self.len();
        let mut report = MergeReport::default();
        if ds.is_empty() {
            return Ok(report);
        }
        let mut projections: Vec<Projection> = Vec::new();
        let mut bumped_groups: Vec<Vec<bool>> = Vec::new();
        let mut pending: Vec<(u32, u32, &crate::trajectory::TrajectoryWindow)> = Vec::new();
        for set in &ds.sets {
            if set.mask.env != self.env || set.mask.l != self.l {
                return Err(ItersError::domain(format!(
                    "feedback for {} with l = {} merged into a {} buffer with l = {}",
                    set.mask.env, set.mask.l, self.env, self.l
                )));
            }
            let p = match projections.iter().position(|p| p.mask == set.mask) {
                Some(p) => p,
                None => {
                    let proj = Projection::build(self, n0, &set.mask);
                    bumped_groups.push(vec![false; proj.groups.len()]);
                    projections.push(proj);
                    projections.len() - 1
                }
            };
            let mask_id = self.mask_id(&set.mask);
            let mut memo: HashMap<Vec<u32>, Option<u32>> = HashMap::new();
            for w in &set.windows {
                if w.kind != self.env || w.len() != self.l {
                    return Err(ItersError::domain("augmented window does not match the buffer layout"));
                }
                let sig = ImportanceSignature::of(w, &set.mask);
                let mut memo_key: Vec<u32> = sig.values.iter().map(|v| v.to_bits()).collect();
                memo_key.push(sig.actual_length as u32);
                let best = *memo.entry(memo_key).or_insert_with(|| {
                    let groups = projections[p].matches(&sig);
                    let mut best = None;
                    for g in groups {
                        bumped_groups[p][g] = true;
                        for &i in &projections[p].groups[g].1 {
                            best = best.max(Some(self.marks[i]));
                        }
                    }
                    best
                });
                let mark = best.map_or(1, |m| m + 1);
                if best.is_some() {
                    report.matched += 1;
                }
                pending.push((mark, mask_id, w));
            }
        }
        let mut bump = vec![false; n0];
        for (proj, flags) in projections.iter().zip(&bumped_groups) {
            for (g, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
                for &i in &proj.groups[g].1 {
                    bump[i] = true;
                }
            }
        }
        for (i, b) in bump.into_iter().enumerate() {
            if b {
                self.marks[i] += 1;
                report.incremented += 1;
            }
        }
        self.data.reserve(pending.len() * self.dim);
        for (mark, mask_id, w) in pending {
            self.push_row(|row| encode_into(w, row), mark, mask_id);
            report.appended += 1;
        }
        self.merges += 1;
        report.max_mark = self.marks.iter().copied().max().unwrap_or(0);
        Ok(report)
    }

    pub fn delta_since(&self, from: usize) -> BufferDelta {
        BufferDelta {
            from,
            rows: self.data[from * self.dim..].to_vec(),
            entry_mask: self.entry_mask[from..].to_vec(),
            masks: self.masks.clone(),
            marks: self.marks.clone(),
            merges: self.merges,
        }
    }

    /// Applies a delta taken at this buffer's current length.
    pub fn apply_delta(&mut self, delta: BufferDelta) -> Result<()> {
        if delta.from != self.len() || delta.rows.len() != delta.entry_mask.len() * self.dim {
            return Err(ItersError::Serialization(format!(
                "buffer delta starts at {} but the buffer holds {} entries",
                delta.from,
                self.len()
            )));
        }
        if delta.marks.len() != self.len() + delta.entry_mask.len() {
            return Err(ItersError::Serialization("buffer delta mark count is inconsistent".into()));
        }
        self.masks = delta.masks;
        self.data.extend_from_slice(&delta.rows);
        self.entry_mask.extend_from_slice(&delta.entry_mask);
        self.marks = delta.marks;
        self.merges = delta.merges;
        for i in delta.from..self.len() {
            self.index_entry(i);
        }
        Ok(())
    }

    /// A buffer rebuilt from a delta chain that starts at 0.
    pub fn from_deltas(env: EnvKind, l: usize, deltas: impl IntoIterator<Item = BufferDelta>) -> Result<Self> {
        let mut buf = Self::empty(env, l);
        for d in deltas {
            buf.apply_delta(d)?;
        }
        Ok(buf)
    }

    /// Restores the signature index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.signature_index.clear();
        for i in 0..self.len() {
            self.index_entry(i);
        }
    }
}

/// Seeds the buffer from baseline rollouts; see [`FeedbackBuffer::init`].
pub fn init_buffer(rollouts: &[Episode], l: usize, cap: usize, rng: &mut Rng) -> Result<FeedbackBuffer> {
    FeedbackBuffer::init(rollouts, l, cap, rng)
}

pub fn merge_feedback(buf: &mut FeedbackBuffer, ds: &AugmentedDataset) -> Result<MergeReport> {
    buf.merge_feedback(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{augment, build_dataset, mask_from_explanation, AugmentConfig, AugmentedSet};
    use crate::envs::{Action, Env, State, Transition, FORWARD, TURN};
    use crate::feedback::{Explanation, MarkSource, MarkedTrajectory};
    use crate::rng::{stream, Rng, Stream};
    use crate::trajectory::{StepPair, TrajectoryWindow};
    use proptest::prelude::*;

    fn grid_episodes(count: usize, actions: impl Fn(usize) -> Action, seed: u64) -> Vec<Episode> {
        let mut rng = stream(seed, Stream::TrainEnv);
        (0..count)
            .map(|_| {
                let mut env = Env::new(EnvKind::GridWorld);
                env.reset(&mut rng);
                let mut transitions: Vec<Transition> = Vec::new();
                for t in 0..30 {
                    let tr = env.step(actions(t), &mut rng).unwrap();
                    let done = tr.done;
                    transitions.push(tr);
                    if done {
                        break;
                    }
                }
                Episode {
                    kind: EnvKind::GridWorld,
                    transitions,
                    ret: 0.0,
                }
            })
            .collect()
    }

    fn turn_mark(rng: &mut Rng) -> MarkedTrajectory {
        let steps: Vec<StepPair> = (0..5)
            .map(|i| StepPair::new(State::new(vec![1.0, 1.0, 3.0, 3.0, (i % 4) as f32]), TURN))
            .collect();
        let window = clip_pad(EnvKind::GridWorld, &steps, 5, rng).unwrap();
        MarkedTrajectory {
            window,
            explanation: Explanation::Action { mask: vec![true, true, true, true, false] },
            source: MarkSource { episode: 0, start: 0, end: 4 },
        }
    }

    fn dataset(marks: &[MarkedTrajectory], p: usize, rng: &mut Rng) -> AugmentedDataset {
        build_dataset(marks, &AugmentConfig { p, ..Default::default() }, rng).unwrap()
    }

    #[test]
    fn init_respects_cap_and_zero_marks() {
        let eps = grid_episodes(10, |_| TURN, 1);
        let mut rng = stream(1, Stream::Buffer);
        let buf = init_buffer(&eps, 5, 1_000, &mut rng).unwrap();
        assert_eq!(buf.len(), 10 * 26);
        assert!(buf.marks().iter().all(|&m| m == 0));
        let small = init_buffer(&eps, 5, 100, &mut rng).unwrap();
        assert_eq!(small.len(), 100);
        assert!(init_buffer(&eps, 5, 0, &mut rng).is_err());
        assert!(init_buffer(&[], 5, 10, &mut rng).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let eps = grid_episodes(10, |t| if t % 3 == 0 { FORWARD } else { TURN }, 2);
        let a = init_buffer(&eps, 5, 50, &mut stream(4, Stream::Buffer)).unwrap();
        let b = init_buffer(&eps, 5, 50, &mut stream(4, Stream::Buffer)).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn first_feedback_gets_mark_one() {
        let eps = grid_episodes(3, |_| FORWARD, 3);
        let mut rng = stream(3, Stream::Buffer);
        let mut buf = init_buffer(&eps, 5, 100, &mut rng).unwrap();
        let n0 = buf.len();
        let ds = dataset(&[turn_mark(&mut rng)], 10, &mut rng);
        let report = buf.merge_feedback(&ds).unwrap();
        assert_eq!(report.appended, 10);
        assert_eq!(buf.len(), n0 + 10);
        assert!(buf.marks()[n0..].iter().all(|&m| m == 1));
        assert!(buf.marks()[..n0].iter().all(|&m| m == 0));
    }

    #[test]
    fn repeat_feedback_counts_up() {
        let eps = grid_episodes(3, |_| FORWARD, 3);
        let mut rng = stream(5, Stream::Buffer);
        let mut buf = init_buffer(&eps, 5, 100, &mut rng).unwrap();
        let n0 = buf.len();
        let mark = turn_mark(&mut rng);
        buf.merge_feedback(&dataset(std::slice::from_ref(&mark), 10, &mut rng)).unwrap();
        let ds = dataset(&[mark], 10, &mut rng);
        let report = buf.merge_feedback(&ds).unwrap();
        assert_eq!(report.incremented, 10);
        assert!(buf.marks()[n0..n0 + 10].iter().all(|&m| m == 2));
        assert!(buf.marks()[n0 + 10..].iter().all(|&m| m == 2));
    }

    #[test]
    fn similar_baseline_entry_is_incremented() {
        let eps = grid_episodes(2, |_| TURN, 6);
        let mut rng = stream(6, Stream::Buffer);
        let mut buf = init_buffer(&eps, 5, 100, &mut rng).unwrap();
        let n0 = buf.len();
        let report = buf.merge_feedback(&dataset(&[turn_mark(&mut rng)], 10, &mut rng)).unwrap();
        assert_eq!(report.incremented, n0);
        assert!(buf.marks().iter().all(|&m| m == 1));
    }

    #[test]
    fn empty_dataset_leaves_buffer_alone() {
        let eps = grid_episodes(2, |_| TURN, 7);
        let mut rng = stream(7, Stream::Buffer);
        let mut buf = init_buffer(&eps, 5, 100, &mut rng).unwrap();
        let before = buf.marks().to_vec();
        buf.merge_feedback(&AugmentedDataset::default()).unwrap();
        assert_eq!(buf.marks(), &before[..]);
        assert!(!buf.has_feedback());
    }

    #[test]
    fn lookup_finds_own_signatures() {
        let eps = grid_episodes(2, |_| FORWARD, 8);
        let mut rng = stream(8, Stream::Buffer);
        let mut buf = init_buffer(&eps, 5, 100, &mut rng).unwrap();
        let mark = turn_mark(&mut rng);
        let n0 = buf.len();
        buf.merge_feedback(&dataset(std::slice::from_ref(&mark), 10, &mut rng)).unwrap();
        let mask = mask_from_explanation(&mark.explanation, &mark.window);
        let sig = ImportanceSignature::of(&mark.window, &mask);
        assert_eq!(buf.lookup(&sig, &mask), (n0..n0 + 10).collect::<Vec<_>>());
    }

    #[test]
    fn deltas_rebuild_the_buffer() {
        let eps = grid_episodes(2, |_| TURN, 9);
        let mut rng = stream(9, Stream::Buffer);
        let mut buf = init_buffer(&eps, 5, 100, &mut rng).unwrap();
        let d0 = buf.delta_since(0);
        let n0 = buf.len();
        buf.merge_feedback(&dataset(&[turn_mark(&mut rng)], 10, &mut rng)).unwrap();
        let d1 = buf.delta_since(n0);
        let back = FeedbackBuffer::from_deltas(EnvKind::GridWorld, 5, [d0, d1]).unwrap();
        assert_eq!(back.data, buf.data);
        assert_eq!(back.marks, buf.marks);
        assert_eq!(back.signature_index.len(), buf.signature_index.len());
    }

    #[test]
    fn mismatched_feedback_rejected() {
        let eps = grid_episodes(2, |_| TURN, 10);
        let mut rng = stream(10, Stream::Buffer);
        let mut buf = init_buffer(&eps, 5, 100, &mut rng).unwrap();
        let w = TrajectoryWindow {
            kind: EnvKind::Inventory,
            steps: vec![StepPair::new(State::new(vec![0.0]), Action(0)); 5],
            actual_length: 5,
        };
        let ds = AugmentedDataset {
            sets: vec![AugmentedSet {
                source: 0,
                mask: ImportanceMask::unexplained(EnvKind::Inventory, 5),
                windows: vec![w],
            }],
        };
        assert!(buf.merge_feedback(&ds).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn merge_invariants(seed in 0u64..100_000, rounds in 1usize..4, p in 1usize..12) {
            let mut rng = stream(seed, Stream::Buffer);
            let eps = grid_episodes(2, |t| if (t + seed as usize) % 4 == 0 { FORWARD } else { TURN }, seed);
            let mut buf = init_buffer(&eps, 5, 40, &mut rng).unwrap();
            let mark = turn_mark(&mut rng);
            let mut previous_tail: Option<(usize, usize)> = None;
            for _ in 0..rounds {
                let before = buf.marks().to_vec();
                let ds = AugmentedDataset {
                    sets: vec![AugmentedSet {
                        source: 0,
                        mask: mask_from_explanation(&mark.explanation, &mark.window),
                        windows: augment(&mark, &AugmentConfig { p, ..Default::default() }, &mut rng).unwrap(),
                    }],
                };
                buf.merge_feedback(&ds).unwrap();
                prop_assert_eq!(buf.len(), before.len() + p);
                for (i, &m) in before.iter().enumerate() {
                    prop_assert!(buf.marks()[i] == m || buf.marks()[i] == m + 1);
                }
                // identical feedback bumps the previous round's entries by exactly one
                if let Some((start, end)) = previous_tail {
                    for i in start..end {
                        prop_assert_eq!(buf.marks()[i], before[i] + 1);
                    }
                }
                previous_tail = Some((before.len(), buf.len()));
            }
        }
    }
}
