//! Sliding-window exploration datasets.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// One observed transition `(s_h, a_h, s_{h+1})`, tagged with its round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionSample {
    pub round: usize,
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
}

/// Transitions gathered by one round of exploration, indexed by step.
///
/// `mle[h]` is the step-`h` triple of sub-episode `h` (states reached with
/// the exploration policy up to `h - 1`, then one uniform action before `h`).
/// `cov[h]` is the step-`h` triple of sub-episode `h + 1` (states reached
/// with the exploration policy). No sub-episode produces `cov[H-1]`, so the
/// last step reuses the `mle` triple of sub-episode `H`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundSamples {
    pub round: usize,
    pub mle: Vec<TransitionSample>,
    pub cov: Vec<TransitionSample>,
}

/// Per-step FIFO lists holding only the latest `capacity` rounds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowDataset {
    capacity: usize,
    mle: Vec<VecDeque<TransitionSample>>,
    cov: Vec<VecDeque<TransitionSample>>,
}

impl WindowDataset {
    pub fn new(horizon: usize, capacity: usize) -> Self {
        assert!(capacity >= 1, "window must hold at least one round");
        Self {
            capacity,
            mle: vec![VecDeque::new(); horizon],
            cov: vec![VecDeque::new(); horizon],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn horizon(&self) -> usize {
        self.mle.len()
    }

    /// Appends round `k` and evicts everything older than `k - W + 1`.
    pub fn push_round(&mut self, samples: &RoundSamples) {
        assert_eq!(samples.mle.len(), self.horizon());
        assert_eq!(samples.cov.len(), self.horizon());
        for (list, x) in self.mle.iter_mut().zip(&samples.mle) {
            list.push_back(*x);
        }
        for (list, x) in self.cov.iter_mut().zip(&samples.cov) {
            list.push_back(*x);
        }
        let oldest = (samples.round + 1).saturating_sub(self.capacity).max(1);
        for list in self.mle.iter_mut().chain(self.cov.iter_mut()) {
            while list.front().is_some_and(|x| x.round < oldest) {
                list.pop_front();
            }
        }
    }

    pub fn mle_set(&self, h: usize) -> &VecDeque<TransitionSample> {
        &self.mle[h]
    }

    pub fn cov_set(&self, h: usize) -> &VecDeque<TransitionSample> {
        &self.cov[h]
    }

    /// Largest per-step list length.
    pub fn max_len(&self) -> usize {
        self.mle.iter().chain(&self.cov).map(VecDeque::len).max().unwrap_or(0)
    }

    /// Oldest round index still held, if any.
    pub fn oldest_round(&self) -> Option<usize> {
        self.mle
            .iter()
            .chain(&self.cov)
            .filter_map(|l| l.front().map(|x| x.round))
            .min()
    }
}
