//! Simulated users, one per environment, each marking the behavior its
//! environment reward fails to penalize.

use crate::augment::mask_from_explanation;
use crate::envs::gridworld::pose;
use crate::envs::{EnvKind, TURN, EGO_Y};
use crate::error::Result;
use crate::rng::Rng;
use crate::shaping::{similar, ImportanceSignature};
use crate::trajectory::{clip_pad, sliding_windows, Episode, StepPair};

use super::{detect_lane_changes, evaluate_rule, Explanation, MarkSource, MarkedTrajectory, Rule};

/// Lane changes tolerated in one window before the highway user objects.
pub const MAX_LANE_CHANGES: usize = 2;

/// Steps `t` where actions `t..t+4` are all turns and the pose after them
/// equals the pose before.
pub fn four_turn_starts(ep: &Episode) -> Vec<usize> {
    let tr = &ep.transitions;
    if tr.len() < 4 {
        return Vec::new();
    }
    (0..=tr.len() - 4)
        .filter(|&t| {
            tr[t..t + 4].iter().all(|x| x.action == TURN) && pose(&tr[t].state) == pose(&tr[t + 3].next_state)
        })
        .collect()
}

/// Marks produced by the environment's simulated user for one checkpoint.
/// Marks with the same importance signature are emitted once.
pub fn simulate_feedback(kind: EnvKind, summaries: &[Episode], l: usize, rng: &mut Rng) -> Result<Vec<MarkedTrajectory>> {
    let candidates = match kind {
        EnvKind::GridWorld => gridworld_marks(summaries, l, rng)?,
        EnvKind::Highway => window_marks(summaries, l, rng, |pairs, w| {
            Ok((detect_lane_changes(w)? > MAX_LANE_CHANGES && pairs.len() == l).then(|| Explanation::Feature {
                feature_indices: vec![EGO_Y],
            }))
        })?,
        EnvKind::Inventory => window_marks(summaries, l, rng, |pairs, w| {
            let rule = Rule::frequent_orders();
            Ok((pairs.len() == l && evaluate_rule(&rule, w)?).then_some(Explanation::Rule { rule }))
        })?,
    };
    let mut out: Vec<MarkedTrajectory> = Vec::new();
    let mut seen: Vec<ImportanceSignature> = Vec::new();
    for mark in candidates {
        let sig = ImportanceSignature::of(&mark.window, &mask_from_explanation(&mark.explanation, &mark.window));
        if seen.iter().any(|s| similar(s, &sig)) {
            continue;
        }
        seen.push(sig);
        out.push(mark);
    }
    Ok(out)
}

/// At most one mark: the first four-turn loop in summary order. The marked
/// range is the `l`-step window opening with the loop (shorter only at the
/// end of an episode), with the four turns as the important actions.
fn gridworld_marks(summaries: &[Episode], l: usize, rng: &mut Rng) -> Result<Vec<MarkedTrajectory>> {
    for (episode, ep) in summaries.iter().enumerate() {
        if let Some(&start) = four_turn_starts(ep).first() {
            let pairs = ep.pairs();
            let end = (start + l.max(4)).min(pairs.len());
            let window = clip_pad(EnvKind::GridWorld, &pairs[start..end], l, rng)?;
            let mut mask = vec![false; window.actual_length];
            for m in mask.iter_mut().take(4) {
                *m = true;
            }
            return Ok(vec![MarkedTrajectory {
                source: MarkSource {
                    episode,
                    start,
                    end: start + window.actual_length - 1,
                },
                window,
                explanation: Explanation::Action { mask },
            }]);
        }
    }
    Ok(Vec::new())
}

fn window_marks<F>(summaries: &[Episode], l: usize, rng: &mut Rng, judge: F) -> Result<Vec<MarkedTrajectory>>
where
    F: Fn(&[StepPair], &crate::trajectory::TrajectoryWindow) -> Result<Option<Explanation>>,
{
    let mut out = Vec::new();
    for (episode, ep) in summaries.iter().enumerate() {
        let pairs = ep.pairs();
        for (start, seg) in sliding_windows(&pairs, l, 1)? {
            let window = clip_pad(ep.kind, seg, l, rng)?;
            if let Some(explanation) = judge(seg, &window)? {
                out.push(MarkedTrajectory {
                    source: MarkSource {
                        episode,
                        start,
                        end: start + seg.len() - 1,
                    },
                    window,
                    explanation,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Action, Env, HighwayAction, Transition};
    use crate::rng::{stream, Stream};

    fn rollout(kind: EnvKind, actions: &[Action], seed: u64) -> Episode {
        let mut rng = stream(seed, Stream::TrainEnv);
        let mut env = Env::new(kind);
        env.reset(&mut rng);
        let mut transitions: Vec<Transition> = Vec::new();
        for &a in actions {
            let t = env.step(a, &mut rng).unwrap();
            let done = t.done;
            transitions.push(t);
            if done {
                break;
            }
        }
        Episode { kind, transitions, ret: 0.0 }
    }

    #[test]
    fn spinning_gridworld_gets_one_mark() {
        let ep = rollout(EnvKind::GridWorld, &[TURN; 30], 1);
        assert_eq!(ep.len(), 30);
        let mut rng = stream(1, Stream::Padding);
        let marks = simulate_feedback(EnvKind::GridWorld, &[ep.clone(), ep], 5, &mut rng).unwrap();
        assert_eq!(marks.len(), 1);
        let m = &marks[0];
        m.validate(5).unwrap();
        assert!(m.window.steps[..4].iter().all(|s| s.action == TURN));
        assert!(matches!(&m.explanation, Explanation::Action { mask } if mask[..4].iter().all(|&b| b)));
    }

    #[test]
    fn direct_gridworld_path_is_unmarked() {
        let ep = rollout(EnvKind::GridWorld, &[crate::envs::FORWARD; 30], 2);
        let mut rng = stream(1, Stream::Padding);
        assert!(simulate_feedback(EnvKind::GridWorld, &[ep], 5, &mut rng).unwrap().is_empty());
    }

    fn weave(pattern: &[HighwayAction], len: usize) -> Vec<Action> {
        (0..len).map(|i| Action(pattern[i % pattern.len()] as usize)).collect()
    }

    #[test]
    fn weaving_highway_window_marked_at_start() {
        // lanes 1,2,1,2,1,1,...
        let mut actions = weave(&[HighwayAction::LaneRight, HighwayAction::LaneLeft], 4);
        actions.extend(std::iter::repeat_n(Action(HighwayAction::Idle as usize), 36));
        let ep = rollout(EnvKind::Highway, &actions, 3);
        let mut rng = stream(1, Stream::Padding);
        let marks = simulate_feedback(EnvKind::Highway, &[ep.clone()], 5, &mut rng).unwrap();
        let starts: Vec<usize> = marks.iter().map(|m| m.source.start).collect();
        assert!(starts.contains(&0), "starts {starts:?}");
        for m in &marks {
            m.validate(5).unwrap();
            assert!(detect_lane_changes(&m.window).unwrap() > MAX_LANE_CHANGES);
        }
        // brute-force scan of the recorded lanes
        let lanes: Vec<i32> = ep
            .transitions
            .iter()
            .map(|t| crate::envs::lane_of(t.state.features[EGO_Y]))
            .collect();
        let expected = (0..=lanes.len() - 5)
            .filter(|&s| lanes[s..s + 5].windows(2).filter(|p| p[0] != p[1]).count() > 2)
            .count();
        assert!(marks.len() <= expected && !marks.is_empty());
    }

    #[test]
    fn daily_orders_marked_once() {
        let ep = rollout(EnvKind::Inventory, &[Action(3); 14], 4);
        let mut rng = stream(1, Stream::Padding);
        let marks = simulate_feedback(EnvKind::Inventory, &[ep.clone()], 7, &mut rng).unwrap();
        assert_eq!(marks.len(), 1);
        assert_eq!(marks[0].source.start, 0);
        let pairs = ep.pairs();
        let all = sliding_windows(&pairs, 7, 1).unwrap();
        assert_eq!(all.len(), 8);
        for (_, seg) in all {
            let w = clip_pad(EnvKind::Inventory, seg, 7, &mut rng).unwrap();
            assert!(evaluate_rule(&Rule::frequent_orders(), &w).unwrap());
        }
    }

    #[test]
    fn feedback_is_deterministic() {
        let ep = rollout(EnvKind::Inventory, &[Action(1), Action(0), Action(2)].repeat(5), 5);
        let run = || {
            let mut rng = stream(9, Stream::Padding);
            simulate_feedback(EnvKind::Inventory, &[ep.clone()], 7, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }
}
