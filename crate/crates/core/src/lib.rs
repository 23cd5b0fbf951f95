//! Iterative reward shaping from trajectory-level feedback with explanations.
//!
//! A DQN agent trains on a misspecified environment reward. After every `k`
//! steps its best episodes are shown to a user (or a simulated one) who marks
//! unwanted windows and says why. Marked windows are augmented, merged into a
//! feedback buffer with per-window mark counts, and a regressor fitted on that
//! buffer becomes a penalty subtracted from the environment reward.

pub mod agent;
pub mod augment;
pub mod envs;
pub mod error;
pub mod eval;
pub mod feedback;
pub mod nn;
pub mod orchestrator;
pub mod rng;
pub mod shaping;
pub mod trajectory;

pub use error::{ItersError, Result};
