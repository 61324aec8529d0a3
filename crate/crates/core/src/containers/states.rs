use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// A batch of states together with their forward and backward action masks.
///
/// Built by [`Env::states`](crate::env::Env::states), which keeps the masks
/// consistent with the raw state rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateBatch {
    /// `batch × state_dim` raw integer states.
    pub states: Array2<i64>,
    /// `batch × n_actions`; the last column is the exit action.
    pub forward_masks: Array2<bool>,
    /// `batch × (n_actions - 1)`.
    pub backward_masks: Array2<bool>,
    pub is_sink: Vec<bool>,
    pub is_initial: Vec<bool>,
}

impl StateBatch {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state(&self, index: usize) -> ArrayView1<'_, i64> {
        self.states.row(index)
    }

    pub fn state_vec(&self, index: usize) -> Vec<i64> {
        self.states.row(index).to_vec()
    }

    /// Rows `indices` in order, duplicates allowed.
    pub fn select(&self, indices: &[usize]) -> StateBatch {
        StateBatch {
            states: self.states.select(Axis(0), indices),
            forward_masks: self.forward_masks.select(Axis(0), indices),
            backward_masks: self.backward_masks.select(Axis(0), indices),
            is_sink: indices.iter().map(|&i| self.is_sink[i]).collect(),
            is_initial: indices.iter().map(|&i| self.is_initial[i]).collect(),
        }
    }

    pub fn ensure_no_sink(&self) -> Result<()> {
        match self.is_sink.iter().position(|&s| s) {
            Some(index) => Err(Error::SinkState { index }),
            None => Ok(()),
        }
    }
}

/// Action indices for a batch of states. The exit action is `n_actions - 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionBatch {
    actions: Vec<usize>,
    n_actions: usize,
}

impl ActionBatch {
    pub fn new(actions: Vec<usize>, n_actions: usize) -> Result<Self> {
        if let Some(index) = actions.iter().position(|&a| a >= n_actions) {
            return Err(Error::ActionOutOfRange { index, action: actions[index], n_actions });
        }
        Ok(Self { actions, n_actions })
    }

    pub fn exit_action(&self) -> usize {
        self.n_actions - 1
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn is_exit(&self) -> Vec<bool> {
        self.actions.iter().map(|&a| a == self.n_actions - 1).collect()
    }
}
