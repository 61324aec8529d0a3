//! Pointed-DAG environments.
//!
//! An environment is stateless: it describes the action space, the initial
//! and sink states, how actions move states forward and backward, which
//! actions are allowed where, and the reward of terminating states.

mod ebm;
mod hypergrid;
mod preprocessor;

pub use ebm::DiscreteEbm;
pub use hypergrid::HyperGrid;
pub use preprocessor::Preprocessor;

use std::fmt::Debug;

use ndarray::Array2;

use crate::containers::{ActionBatch, StateBatch};
use crate::error::{Error, Result};

/// Sentinel component value of the sink state.
pub const SINK_FILL: i64 = i64::MIN;

/// Default cap on exhaustive enumeration.
pub const DEFAULT_ENUMERATION_LIMIT: usize = 1_000_000;

/// A discrete pointed DAG.
///
/// Implementors provide the maskless dynamics and masks for a single state;
/// the provided batch methods handle the sink state, mask checks and mask
/// recomputation.
pub trait Env: Debug + Send + Sync {
    fn name(&self) -> &str;

    /// Number of forward actions; the last one is exit.
    fn n_actions(&self) -> usize;

    fn state_dim(&self) -> usize;

    fn s0(&self) -> Vec<i64>;

    fn sf(&self) -> Vec<i64> {
        vec![SINK_FILL; self.state_dim()]
    }

    /// Applies a non-exit forward action. Masks are not checked.
    fn maskless_step(&self, state: &mut [i64], action: usize);

    /// Undoes the forward action `action`. Masks are not checked.
    fn maskless_backward_step(&self, state: &mut [i64], action: usize);

    /// Fills the masks of a non-sink state.
    fn fill_masks(&self, state: &[i64], forward: &mut [bool], backward: &mut [bool]);

    /// Log-reward of a terminating state. Callers guarantee the precondition.
    fn raw_log_reward(&self, state: &[i64]) -> f64;

    /// Whether `state` belongs to the state space (excluding sf).
    fn is_valid_state(&self, state: &[i64]) -> bool;

    /// True when exit is allowed at every state.
    fn all_states_terminating(&self) -> bool;

    /// Number of non-exit actions from s0 to `state`.
    fn depth(&self, state: &[i64]) -> usize;

    /// Largest depth of any state.
    fn max_depth(&self) -> usize;

    /// Number of states excluding sf, `None` when it overflows `usize`.
    fn n_states(&self) -> Option<usize>;

    fn raw_state_index(&self, state: &[i64]) -> usize;

    fn state_from_index(&self, index: usize) -> Vec<i64>;

    fn n_terminating_states(&self) -> Option<usize>;

    /// Index among terminating states, `None` when the state cannot exit.
    fn raw_terminating_index(&self, state: &[i64]) -> Option<usize>;

    fn terminating_state_from_index(&self, index: usize) -> Vec<i64>;

    fn default_preprocessor(&self) -> Preprocessor;

    fn exit_action(&self) -> usize {
        self.n_actions() - 1
    }

    /// Backward action that undoes forward action `action`.
    fn backward_action_of(&self, action: usize) -> usize {
        action
    }

    /// Inverse of [`Env::backward_action_of`].
    fn forward_action_of(&self, backward_action: usize) -> usize {
        backward_action
    }

    fn is_sink(&self, state: &[i64]) -> bool {
        state.iter().all(|&c| c == SINK_FILL)
    }

    fn is_terminating(&self, state: &[i64]) -> bool {
        if self.is_sink(state) {
            return false;
        }
        let (fwd, _) = self.masks_of(state);
        fwd[self.exit_action()]
    }

    fn masks_of(&self, state: &[i64]) -> (Vec<bool>, Vec<bool>) {
        let mut fwd = vec![false; self.n_actions()];
        let mut bwd = vec![false; self.n_actions() - 1];
        if !self.is_sink(state) {
            self.fill_masks(state, &mut fwd, &mut bwd);
        }
        (fwd, bwd)
    }

    /// Wraps raw rows into a batch with freshly computed masks.
    fn states(&self, rows: Array2<i64>) -> StateBatch {
        let n = rows.nrows();
        let mut forward_masks = Array2::from_elem((n, self.n_actions()), false);
        let mut backward_masks = Array2::from_elem((n, self.n_actions() - 1), false);
        let mut is_sink = Vec::with_capacity(n);
        let mut is_initial = Vec::with_capacity(n);
        let s0 = self.s0();
        for (b, row) in rows.rows().into_iter().enumerate() {
            let state = row.to_vec();
            let sink = self.is_sink(&state);
            if !sink {
                let mut fwd = forward_masks.row_mut(b);
                let mut bwd = backward_masks.row_mut(b);
                self.fill_masks(
                    &state,
                    fwd.as_slice_mut().expect("row-major mask"),
                    bwd.as_slice_mut().expect("row-major mask"),
                );
            }
            is_sink.push(sink);
            is_initial.push(state == s0);
        }
        StateBatch { states: rows, forward_masks, backward_masks, is_sink, is_initial }
    }

    fn states_from_vecs(&self, rows: &[Vec<i64>]) -> StateBatch {
        let dim = self.state_dim();
        let flat: Vec<i64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let arr = Array2::from_shape_vec((rows.len(), dim), flat).expect("rows have state_dim entries");
        self.states(arr)
    }

    /// `n` copies of s0.
    fn reset(&self, n: usize) -> StateBatch {
        let s0 = self.s0();
        self.states_from_vecs(&vec![s0; n])
    }

    /// Forward transition. Exit maps to sf and sink states stay sf.
    fn step(&self, states: &StateBatch, actions: &ActionBatch) -> Result<StateBatch> {
        check_lengths(states, actions)?;
        let exit = self.exit_action();
        let mut next = states.states.clone();
        for (b, &action) in actions.as_slice().iter().enumerate() {
            if states.is_sink[b] {
                continue;
            }
            if !states.forward_masks[[b, action]] {
                return Err(Error::MaskViolation { index: b, action });
            }
            let mut row = next.row_mut(b);
            let row = row.as_slice_mut().expect("row-major states");
            if action == exit {
                row.fill(SINK_FILL);
            } else {
                self.maskless_step(row, action);
            }
        }
        Ok(self.states(next))
    }

    /// Backward transition; `actions` index the backward action space.
    fn backward_step(&self, states: &StateBatch, actions: &[usize]) -> Result<StateBatch> {
        if states.len() != actions.len() {
            return Err(Error::Shape(format!(
                "{} states but {} actions",
                states.len(),
                actions.len()
            )));
        }
        let mut prev = states.states.clone();
        for (b, &action) in actions.iter().enumerate() {
            if states.is_sink[b] {
                return Err(Error::SinkState { index: b });
            }
            if states.is_initial[b] {
                return Err(Error::BackwardFromInitial { index: b });
            }
            if action >= self.n_actions() - 1 {
                return Err(Error::ActionOutOfRange {
                    index: b,
                    action,
                    n_actions: self.n_actions() - 1,
                });
            }
            if !states.backward_masks[[b, action]] {
                return Err(Error::MaskViolation { index: b, action });
            }
            let mut row = prev.row_mut(b);
            self.maskless_backward_step(row.as_slice_mut().expect("row-major states"), action);
        }
        Ok(self.states(prev))
    }

    fn log_reward(&self, states: &StateBatch) -> Result<Vec<f64>> {
        (0..states.len())
            .map(|b| {
                if states.is_sink[b] {
                    return Err(Error::SinkState { index: b });
                }
                if !states.forward_masks[[b, self.exit_action()]] {
                    return Err(Error::InvalidState {
                        index: b,
                        reason: "log_reward of a non-terminating state".into(),
                    });
                }
                Ok(self.raw_log_reward(states.states.row(b).as_slice().expect("row-major")))
            })
            .collect()
    }

    fn get_states_indices(&self, states: &StateBatch) -> Result<Vec<usize>> {
        (0..states.len())
            .map(|b| {
                let state = states.state_vec(b);
                self.checked_state_index(&state).map_err(|e| reindex(e, b))
            })
            .collect()
    }

    fn get_terminating_states_indices(&self, states: &StateBatch) -> Result<Vec<usize>> {
        (0..states.len())
            .map(|b| {
                let state = states.state_vec(b);
                self.checked_state_index(&state).map_err(|e| reindex(e, b))?;
                self.raw_terminating_index(&state).ok_or_else(|| Error::InvalidState {
                    index: b,
                    reason: "state is not terminating".into(),
                })
            })
            .collect()
    }

    fn checked_state_index(&self, state: &[i64]) -> Result<usize> {
        if self.is_sink(state) {
            return Err(Error::SinkState { index: 0 });
        }
        if !self.is_valid_state(state) {
            return Err(Error::InvalidState { index: 0, reason: format!("{state:?}") });
        }
        Ok(self.raw_state_index(state))
    }

    /// `(forward action, child)` for every allowed non-exit action.
    fn children(&self, state: &[i64]) -> Vec<(usize, Vec<i64>)> {
        let (fwd, _) = self.masks_of(state);
        (0..self.exit_action())
            .filter(|&a| fwd[a])
            .map(|a| {
                let mut child = state.to_vec();
                self.maskless_step(&mut child, a);
                (a, child)
            })
            .collect()
    }

    /// `(forward action, parent)` for every parent: `parent --action--> state`.
    fn parents(&self, state: &[i64]) -> Vec<(usize, Vec<i64>)> {
        let (_, bwd) = self.masks_of(state);
        (0..self.exit_action())
            .filter(|&a| bwd[self.backward_action_of(a)])
            .map(|a| {
                let mut parent = state.to_vec();
                self.maskless_backward_step(&mut parent, self.backward_action_of(a));
                (a, parent)
            })
            .collect()
    }

    /// Number of states, or an error when above `limit`.
    fn enumerable_states(&self, limit: usize) -> Result<usize> {
        match self.n_states() {
            Some(n) if n <= limit => Ok(n),
            Some(n) => Err(Error::EnumerationBound { n_states: n as u128, limit }),
            None => Err(Error::EnumerationBound { n_states: u128::MAX, limit }),
        }
    }
}

fn check_lengths(states: &StateBatch, actions: &ActionBatch) -> Result<()> {
    if states.len() != actions.len() {
        return Err(Error::Shape(format!(
            "{} states but {} actions",
            states.len(),
            actions.len()
        )));
    }
    Ok(())
}

fn reindex(err: Error, index: usize) -> Error {
    match err {
        Error::SinkState { .. } => Error::SinkState { index },
        Error::InvalidState { reason, .. } => Error::InvalidState { index, reason },
        other => other,
    }
}
