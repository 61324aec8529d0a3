use serde::{Deserialize, Serialize};

use super::{Env, Preprocessor};

/// `ndim`-dimensional grid of side `height`. Action `d < ndim` increments
/// coordinate `d`; every state may exit.
///
/// The reward has a base level `r0` plus two plateaus near the corners:
///
/// ```text
/// R(s) = r0 + r1 · ∏_d 1[0.25 < |s_d/(H-1) - 0.5| <= 0.5]
///           + r2 · ∏_d 1[0.3  < |s_d/(H-1) - 0.5| <  0.4]
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub ndim: usize,
    pub height: usize,
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
}

impl HyperGrid {
    pub const DEFAULT_R0: f64 = 0.1;
    pub const DEFAULT_R1: f64 = 0.5;
    pub const DEFAULT_R2: f64 = 2.0;

    pub fn new(ndim: usize, height: usize, r0: f64) -> Self {
        Self::with_rewards(ndim, height, r0, Self::DEFAULT_R1, Self::DEFAULT_R2)
    }

    pub fn with_rewards(ndim: usize, height: usize, r0: f64, r1: f64, r2: f64) -> Self {
        assert!(ndim >= 1, "HyperGrid needs at least one dimension");
        assert!(height >= 2, "HyperGrid height must be at least 2");
        Self { ndim, height, r0, r1, r2 }
    }

    pub fn reward(&self, state: &[i64]) -> f64 {
        let scale = (self.height - 1) as f64;
        let centered = state.iter().map(|&c| (c as f64 / scale - 0.5).abs());
        let outer = centered.clone().all(|x| 0.25 < x && x <= 0.5);
        let ring = centered.clone().all(|x| 0.3 < x && x < 0.4);
        self.r0 + if outer { self.r1 } else { 0.0 } + if ring { self.r2 } else { 0.0 }
    }
}

impl Env for HyperGrid {
    fn name(&self) -> &str {
        "HyperGrid"
    }

    fn n_actions(&self) -> usize {
        self.ndim + 1
    }

    fn state_dim(&self) -> usize {
        self.ndim
    }

    fn s0(&self) -> Vec<i64> {
        vec![0; self.ndim]
    }

    fn maskless_step(&self, state: &mut [i64], action: usize) {
        state[action] += 1;
    }

    fn maskless_backward_step(&self, state: &mut [i64], action: usize) {
        state[action] -= 1;
    }

    fn fill_masks(&self, state: &[i64], forward: &mut [bool], backward: &mut [bool]) {
        let top = self.height as i64 - 1;
        for d in 0..self.ndim {
            forward[d] = state[d] < top;
            backward[d] = state[d] > 0;
        }
        forward[self.ndim] = true;
    }

    fn raw_log_reward(&self, state: &[i64]) -> f64 {
        self.reward(state).ln()
    }

    fn is_valid_state(&self, state: &[i64]) -> bool {
        state.len() == self.ndim && state.iter().all(|&c| c >= 0 && (c as usize) < self.height)
    }

    fn all_states_terminating(&self) -> bool {
        true
    }

    fn depth(&self, state: &[i64]) -> usize {
        state.iter().sum::<i64>() as usize
    }

    fn max_depth(&self) -> usize {
        self.ndim * (self.height - 1)
    }

    fn n_states(&self) -> Option<usize> {
        self.height.checked_pow(self.ndim as u32)
    }

    fn raw_state_index(&self, state: &[i64]) -> usize {
        state.iter().rev().fold(0, |acc, &c| acc * self.height + c as usize)
    }

    fn state_from_index(&self, mut index: usize) -> Vec<i64> {
        (0..self.ndim)
            .map(|_| {
                let c = index % self.height;
                index /= self.height;
                c as i64
            })
            .collect()
    }

    fn n_terminating_states(&self) -> Option<usize> {
        self.n_states()
    }

    fn raw_terminating_index(&self, state: &[i64]) -> Option<usize> {
        Some(self.raw_state_index(state))
    }

    fn terminating_state_from_index(&self, index: usize) -> Vec<i64> {
        self.state_from_index(index)
    }

    fn default_preprocessor(&self) -> Preprocessor {
        Preprocessor::KHot { n_values: self.height, offset: 0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::containers::ActionBatch;
    use crate::error::Error;
    use ndarray::array;

    fn grid(ndim: usize, height: usize) -> HyperGrid {
        HyperGrid::new(ndim, height, 0.1)
    }

    #[test]
    fn increment_and_exit() {
        let env = grid(2, 4);
        let s = env.states(array![[1, 0], [2, 3]]);
        let next = env.step(&s, &ActionBatch::new(vec![1, 2], 3).unwrap()).unwrap();
        assert_eq!(next.state_vec(0), vec![1, 1]);
        assert_eq!(next.state_vec(1), env.sf());
        assert!(next.is_sink[1]);
        assert_eq!(next.forward_masks.row(1).to_vec(), vec![false; 3]);
    }

    #[test]
    fn sink_stays_sink() {
        let env = grid(2, 4);
        let s = env.states_from_vecs(&[env.sf()]);
        let next = env.step(&s, &ActionBatch::new(vec![0], 3).unwrap()).unwrap();
        assert!(next.is_sink[0]);
    }

    #[test]
    fn mask_violation_names_index() {
        let env = grid(2, 4);
        let s = env.states(array![[0, 0], [3, 1]]);
        let err = env.step(&s, &ActionBatch::new(vec![0, 0], 3).unwrap()).unwrap_err();
        assert!(matches!(err, Error::MaskViolation { index: 1, action: 0 }));
    }

    #[test]
    fn backward_decrements_and_rejects_s0() {
        let env = grid(2, 4);
        let s = env.states(array![[1, 1]]);
        assert_eq!(env.backward_step(&s, &[0]).unwrap().state_vec(0), vec![0, 1]);
        let s0 = env.reset(1);
        assert!(matches!(env.backward_step(&s0, &[0]), Err(Error::BackwardFromInitial { index: 0 })));
    }

    #[test]
    fn masks_follow_bounds() {
        let env = grid(2, 4);
        let s = env.states(array![[3, 1], [0, 0]]);
        assert_eq!(s.forward_masks.row(0).to_vec(), vec![false, true, true]);
        assert_eq!(s.backward_masks.row(1).to_vec(), vec![false, false]);
        assert!(s.is_initial[1]);
    }

    #[test]
    fn rewards_match_hand_values() {
        let env = grid(2, 8);
        let s = env.states(array![[3, 3], [6, 6]]);
        let lr = env.log_reward(&s).unwrap();
        assert!((lr[0] - 0.1f64.ln()).abs() < 1e-12);
        assert!((lr[1] - 2.6f64.ln()).abs() < 1e-12);
        let small = grid(2, 2);
        for i in 0..4 {
            let st = small.state_from_index(i);
            assert!((small.reward(&st) - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn log_reward_of_sink_is_error() {
        let env = grid(2, 4);
        let s = env.states_from_vecs(&[env.sf()]);
        assert!(matches!(env.log_reward(&s), Err(Error::SinkState { index: 0 })));
    }

    #[test]
    fn indices() {
        let env = grid(2, 8);
        let s = env.states(array![[0, 0], [7, 7], [1, 2]]);
        assert_eq!(env.get_states_indices(&s).unwrap(), vec![0, 63, 17]);
        assert_eq!(env.n_states(), Some(64));
        let sf = env.states_from_vecs(&[env.sf()]);
        assert!(env.get_states_indices(&sf).is_err());
    }
}
