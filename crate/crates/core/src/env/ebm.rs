use serde::{Deserialize, Serialize};

use super::{Env, Preprocessor};

const UNSET: i64 = -1;

/// Binary vectors built one coordinate at a time.
///
/// States hold `-1` (unset), `0` or `1` per coordinate. Actions `[0, n)` write
/// `0` at coordinate `i`, actions `[n, 2n)` write `1`, action `2n` exits and is
/// only allowed once every coordinate is set. Backward action `k` unsets the
/// coordinate written by forward action `k`.
///
/// The reward is `exp(-alpha · E(x))` with the Ising energy
/// `E(x) = -Σ_{i<j} J_ij σ(x_i) σ(x_j)`, `σ(0) = -1`, `σ(1) = 1`. The default
/// coupling is the nearest-neighbour chain `J_{i,i+1} = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteEbm {
    pub ndim: usize,
    pub alpha: f64,
    coupling: Vec<Vec<f64>>,
}

impl DiscreteEbm {
    pub fn new(ndim: usize, alpha: f64) -> Self {
        let mut coupling = vec![vec![0.0; ndim]; ndim];
        for i in 0..ndim.saturating_sub(1) {
            coupling[i][i + 1] = 1.0;
        }
        Self::with_coupling(ndim, alpha, coupling)
    }

    /// Only the strict upper triangle of `coupling` is read.
    pub fn with_coupling(ndim: usize, alpha: f64, coupling: Vec<Vec<f64>>) -> Self {
        assert!(ndim >= 1, "DiscreteEbm needs at least one coordinate");
        assert!(
            coupling.len() == ndim && coupling.iter().all(|r| r.len() == ndim),
            "coupling must be ndim x ndim"
        );
        Self { ndim, alpha, coupling }
    }

    pub fn energy(&self, state: &[i64]) -> f64 {
        let spin = |v: i64| if v == 1 { 1.0 } else { -1.0 };
        let mut e = 0.0;
        for i in 0..self.ndim {
            for j in i + 1..self.ndim {
                e -= self.coupling[i][j] * spin(state[i]) * spin(state[j]);
            }
        }
        e
    }
}

impl Env for DiscreteEbm {
    fn name(&self) -> &str {
        "DiscreteEBM"
    }

    fn n_actions(&self) -> usize {
        2 * self.ndim + 1
    }

    fn state_dim(&self) -> usize {
        self.ndim
    }

    fn s0(&self) -> Vec<i64> {
        vec![UNSET; self.ndim]
    }

    fn maskless_step(&self, state: &mut [i64], action: usize) {
        state[action % self.ndim] = (action / self.ndim) as i64;
    }

    fn maskless_backward_step(&self, state: &mut [i64], action: usize) {
        state[action % self.ndim] = UNSET;
    }

    fn fill_masks(&self, state: &[i64], forward: &mut [bool], backward: &mut [bool]) {
        let n = self.ndim;
        for i in 0..n {
            let unset = state[i] == UNSET;
            forward[i] = unset;
            forward[n + i] = unset;
            backward[i] = state[i] == 0;
            backward[n + i] = state[i] == 1;
        }
        forward[2 * n] = state.iter().all(|&c| c != UNSET);
    }

    fn raw_log_reward(&self, state: &[i64]) -> f64 {
        -self.alpha * self.energy(state)
    }

    fn is_valid_state(&self, state: &[i64]) -> bool {
        state.len() == self.ndim && state.iter().all(|&c| (UNSET..=1).contains(&c))
    }

    fn all_states_terminating(&self) -> bool {
        false
    }

    fn depth(&self, state: &[i64]) -> usize {
        state.iter().filter(|&&c| c != UNSET).count()
    }

    fn max_depth(&self) -> usize {
        self.ndim
    }

    fn n_states(&self) -> Option<usize> {
        3usize.checked_pow(self.ndim as u32)
    }

    fn raw_state_index(&self, state: &[i64]) -> usize {
        state.iter().rev().fold(0, |acc, &c| acc * 3 + (c + 1) as usize)
    }

    fn state_from_index(&self, mut index: usize) -> Vec<i64> {
        (0..self.ndim)
            .map(|_| {
                let c = index % 3;
                index /= 3;
                c as i64 - 1
            })
            .collect()
    }

    fn n_terminating_states(&self) -> Option<usize> {
        1usize.checked_shl(self.ndim as u32)
    }

    fn raw_terminating_index(&self, state: &[i64]) -> Option<usize> {
        if state.iter().any(|&c| c == UNSET) {
            return None;
        }
        Some(state.iter().rev().fold(0, |acc, &c| acc * 2 + c as usize))
    }

    fn terminating_state_from_index(&self, index: usize) -> Vec<i64> {
        (0..self.ndim).map(|i| ((index >> i) & 1) as i64).collect()
    }

    fn default_preprocessor(&self) -> Preprocessor {
        Preprocessor::Identity
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::containers::ActionBatch;
    use ndarray::array;

    #[test]
    fn set_and_unset() {
        let env = DiscreteEbm::new(2, 0.5);
        let s = env.states(array![[-1, -1]]);
        let next = env.step(&s, &ActionBatch::new(vec![2], 5).unwrap()).unwrap();
        assert_eq!(next.state_vec(0), vec![1, -1]);
        let s = env.states(array![[1, 0]]);
        assert_eq!(env.backward_step(&s, &[1]).unwrap().state_vec(0), vec![1, -1]);
    }

    #[test]
    fn masks() {
        let env = DiscreteEbm::new(2, 0.5);
        let s = env.states(array![[1, -1]]);
        assert_eq!(s.forward_masks.row(0).to_vec(), vec![false, true, false, true, false]);
        assert_eq!(s.backward_masks.row(0).to_vec(), vec![false, false, true, false]);
        let full = env.states(array![[0, 1]]);
        assert!(full.forward_masks[[0, 4]]);
    }

    #[test]
    fn rewards() {
        let env = DiscreteEbm::new(2, 0.5);
        let s = env.states(array![[1, 1], [0, 1]]);
        let lr = env.log_reward(&s).unwrap();
        assert!((lr[0] - 0.5).abs() < 1e-15);
        assert!((lr[1] + 0.5).abs() < 1e-15);
        let partial = env.states(array![[0, -1]]);
        assert!(env.log_reward(&partial).is_err());
    }

    #[test]
    fn indices() {
        let env = DiscreteEbm::new(2, 0.5);
        let s = env.states(array![[-1, -1], [1, 1]]);
        assert_eq!(env.get_states_indices(&s).unwrap(), vec![0, 8]);
        assert_eq!(env.n_states(), Some(9));
        assert_eq!(env.n_terminating_states(), Some(4));
        for i in 0..4 {
            let x = env.terminating_state_from_index(i);
            assert_eq!(env.raw_terminating_index(&x), Some(i));
        }
    }
}
