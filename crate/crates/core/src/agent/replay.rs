use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// Fixed-capacity ring of single transitions, stored column-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    states: Vec<f32>,
    next_states: Vec<f32>,
    actions: Vec<u32>,
    rewards: Vec<f32>,
    terminal: Vec<bool>,
    head: usize,
    len: usize,
}

/// A sampled minibatch, row-major.
pub struct Batch {
    pub states: Vec<f32>,
    pub next_states: Vec<f32>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f32>,
    pub terminal: Vec<bool>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            state_dim,
            states: Vec::new(),
            next_states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminal: Vec::new(),
            head: 0,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, state: &[f32], action: usize, reward: f32, next_state: &[f32], terminal: bool) {
        debug_assert_eq!(state.len(), self.state_dim);
        let d = self.state_dim;
        if self.len < self.capacity {
            self.states.extend_from_slice(state);
            self.next_states.extend_from_slice(next_state);
            self.actions.push(action as u32);
            self.rewards.push(reward);
            self.terminal.push(terminal);
            self.len += 1;
        } else {
            let i = self.head;
            self.states[i * d..(i + 1) * d].copy_from_slice(state);
            self.next_states[i * d..(i + 1) * d].copy_from_slice(next_state);
            self.actions[i] = action as u32;
            self.rewards[i] = reward;
            self.terminal[i] = terminal;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Batch {
        let d = self.state_dim;
        let mut batch = Batch {
            states: Vec::with_capacity(n * d),
            next_states: Vec::with_capacity(n * d),
            actions: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            terminal: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let i = rng.random_range(0..self.len);
            batch.states.extend_from_slice(&self.states[i * d..(i + 1) * d]);
            batch.next_states.extend_from_slice(&self.next_states[i * d..(i + 1) * d]);
            batch.actions.push(self.actions[i] as usize);
            batch.rewards.push(self.rewards[i]);
            batch.terminal.push(self.terminal[i]);
        }
        batch
    }

    /// Stored rewards in insertion slot order.
    pub fn rewards(&self) -> &[f32] {
        &self.rewards
    }

    /// FNV-1a over every stored bit, for cheap equality checks across runs.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for v in self.states.iter().chain(&self.next_states).chain(&self.rewards) {
            eat(&v.to_bits().to_le_bytes());
        }
        for a in &self.actions {
            eat(&a.to_le_bytes());
        }
        for &t in &self.terminal {
            eat(&[t as u8]);
        }
        eat(&(self.head as u64).to_le_bytes());
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn ring_overwrites_oldest() {
        let mut r = ReplayBuffer::new(3, 1);
        for i in 0..5 {
            r.push(&[i as f32], 0, i as f32, &[0.0], false);
        }
        assert_eq!(r.len(), 3);
        let mut rewards = r.rewards().to_vec();
        rewards.sort_by(f32::total_cmp);
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn sample_shapes() {
        let mut r = ReplayBuffer::new(10, 2);
        for i in 0..4 {
            r.push(&[i as f32, 1.0], i, 0.5, &[0.0, 0.0], i == 3);
        }
        let b = r.sample(8, &mut stream(1, Stream::Replay));
        assert_eq!(b.states.len(), 16);
        assert_eq!(b.actions.len(), 8);
        assert!(b.actions.iter().all(|&a| a < 4));
    }
}
