//! Transitions and the replay buffer.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BufferError {
    #[error("cannot sample from an empty buffer")]
    EmptyBuffer,
}

/// `(s_i || g, a_i, r_i, s_{i+1} || g)` with flat observations that embed the goal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// Episode ended after this transition.
    pub done: bool,
}

/// Fixed-capacity FIFO ring.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        Self {
            capacity,
            data: Vec::new(),
            next: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Overwrites the oldest entry once full.
    pub fn store(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.data.len() < self.capacity {
            0
        } else {
            self.next
        };
        self.data[split..].iter().chain(self.data[..split].iter())
    }

    /// Uniform draws with replacement.
    pub fn sample_batch(
        &self,
        size: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Transition>, BufferError> {
        if self.data.is_empty() {
            return Err(BufferError::EmptyBuffer);
        }
        Ok((0..size)
            .map(|_| self.data[rng.gen_range(0..self.data.len())].clone())
            .collect())
    }

    /// Indices that [`sample_batch`](Self::sample_batch) would draw.
    pub fn sample_indices(
        &self,
        size: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>, BufferError> {
        if self.data.is_empty() {
            return Err(BufferError::EmptyBuffer);
        }
        Ok((0..size)
            .map(|_| rng.gen_range(0..self.data.len()))
            .collect())
    }
}
