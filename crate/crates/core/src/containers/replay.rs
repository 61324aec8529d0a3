use std::collections::VecDeque;

use rand::Rng;

use super::{Trajectories, Trajectory};
use crate::error::{Error, Result};

/// FIFO store of complete trajectories with oldest-first eviction.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Trajectory>,
    layout: Option<(usize, usize)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: VecDeque::with_capacity(capacity), layout: None }
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

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.items.iter()
    }

    pub fn add(&mut self, batch: &Trajectories) {
        self.layout.get_or_insert((batch.n_actions(), batch.state_dim()));
        for traj in batch.iter() {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back(traj);
        }
    }

    /// `n` trajectories drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Trajectories> {
        let (n_actions, dim) = match self.layout {
            Some(layout) if !self.items.is_empty() => layout,
            _ => return Err(Error::EmptyBuffer),
        };
        let picked: Vec<Trajectory> =
            (0..n).map(|_| self.items[rng.random_range(0..self.items.len())].clone()).collect();
        Trajectories::from_trajectories(&picked, n_actions, dim)
    }
}
