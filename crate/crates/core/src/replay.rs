//! Uniform experience replay.

use da3_gridworld::{Action, Observation};
use da3_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::obs_batch;
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
}

/// Fixed-capacity ring of transitions with a seeded uniform sampler.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(CoreError::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(4096)),
            next: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends, overwriting the oldest entry once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// `batch` indices drawn uniformly with replacement; `None` while the
    /// buffer holds fewer than `batch` transitions.
    pub fn sample_indices(&mut self, batch: usize) -> Option<Vec<usize>> {
        if batch == 0 || self.items.len() < batch {
            return None;
        }
        let n = self.items.len();
        Some((0..batch).map(|_| self.rng.gen_range(0..n)).collect())
    }

    pub fn sample(&mut self, batch: usize) -> Option<Batch> {
        let idx = self.sample_indices(batch)?;
        let picked: Vec<&Transition> = idx.iter().map(|&i| &self.items[i]).collect();
        Some(Batch::from_transitions(&picked).expect("stored observations share one shape"))
    }
}

/// Transitions stacked into tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub obs: Tensor,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_obs: Tensor,
    pub done: Vec<bool>,
}

impl Batch {
    pub fn from_transitions(ts: &[&Transition]) -> Result<Self> {
        Ok(Self {
            obs: obs_batch(ts.iter().map(|t| &t.obs))?,
            actions: ts.iter().map(|t| t.action.index()).collect(),
            rewards: ts.iter().map(|t| t.reward).collect(),
            next_obs: obs_batch(ts.iter().map(|t| &t.next_obs))?,
            done: ts.iter().map(|t| t.done).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}
