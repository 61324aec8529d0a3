use std::io::Write;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::env::{Env, SINK_FILL};
use crate::error::{Error, Result};

use super::StateBatch;

/// One complete trajectory: the states visited before exit and the actions
/// taken from each of them. The last action is exit, so `states.len() ==
/// actions.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<i64>>,
    pub actions: Vec<usize>,
    pub log_reward: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn last_state(&self) -> Option<&[i64]> {
        self.states.last().map(Vec::as_slice)
    }
}

/// A time-major batch of complete trajectories padded with sf.
///
/// `states[t, b]` is the state of trajectory `b` after `t` actions; rows
/// `lengths[b]..` are sf. `actions[t, b]` is the action taken at time `t`,
/// padded with the sentinel `n_actions` after exit.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectories {
    pub states: Array3<i64>,
    pub actions: Array2<usize>,
    pub lengths: Vec<usize>,
    pub log_rewards: Vec<f64>,
    n_actions: usize,
}

impl Trajectories {
    pub fn empty(n_actions: usize, state_dim: usize) -> Self {
        Self {
            states: Array3::from_elem((1, 0, state_dim), SINK_FILL),
            actions: Array2::from_elem((0, 0), n_actions),
            lengths: Vec::new(),
            log_rewards: Vec::new(),
            n_actions,
        }
    }

    /// Assembles raw arrays, checking the padding and exit invariants.
    pub fn from_parts(
        states: Array3<i64>,
        actions: Array2<usize>,
        lengths: Vec<usize>,
        log_rewards: Vec<f64>,
        n_actions: usize,
    ) -> Result<Self> {
        let (t1, b, _) = states.dim();
        if actions.dim() != (t1 - 1, b) || lengths.len() != b || log_rewards.len() != b {
            return Err(Error::Shape(format!(
                "states {:?}, actions {:?}, {} lengths, {} rewards",
                states.dim(),
                actions.dim(),
                lengths.len(),
                log_rewards.len()
            )));
        }
        for (i, &len) in lengths.iter().enumerate() {
            if len == 0 {
                return Err(Error::EmptyTrajectory { index: i });
            }
            if len > t1 - 1 {
                return Err(Error::Shape(format!("trajectory {i} longer than the batch")));
            }
            if actions[[len - 1, i]] != n_actions - 1 {
                return Err(Error::InvalidState {
                    index: i,
                    reason: "trajectory does not end with exit".into(),
                });
            }
            let padded_ok = (len..t1).all(|t| states.slice(ndarray::s![t, i, ..]).iter().all(|&c| c == SINK_FILL))
                && (len..t1 - 1).all(|t| actions[[t, i]] == n_actions);
            if !padded_ok {
                return Err(Error::InvalidState { index: i, reason: "bad padding".into() });
            }
        }
        Ok(Self { states, actions, lengths, log_rewards, n_actions })
    }

    pub fn from_trajectories(items: &[Trajectory], n_actions: usize, state_dim: usize) -> Result<Self> {
        let b = items.len();
        let t_max = items.iter().map(Trajectory::len).max().unwrap_or(0);
        let mut states = Array3::from_elem((t_max + 1, b, state_dim), SINK_FILL);
        let mut actions = Array2::from_elem((t_max, b), n_actions);
        for (i, traj) in items.iter().enumerate() {
            if traj.states.len() != traj.actions.len() {
                return Err(Error::Shape(format!(
                    "trajectory {i} has {} states and {} actions",
                    traj.states.len(),
                    traj.actions.len()
                )));
            }
            for (t, (s, &a)) in traj.states.iter().zip(&traj.actions).enumerate() {
                if s.len() != state_dim {
                    return Err(Error::Shape(format!("trajectory {i} state {t} has wrong width")));
                }
                states.slice_mut(ndarray::s![t, i, ..]).assign(&ndarray::aview1(s));
                actions[[t, i]] = a;
            }
        }
        Self::from_parts(
            states,
            actions,
            items.iter().map(Trajectory::len).collect(),
            items.iter().map(|t| t.log_reward).collect(),
            n_actions,
        )
    }

    pub fn concat(parts: &[&Trajectories]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let items: Vec<Trajectory> = parts.iter().flat_map(|p| p.iter()).collect();
        Self::from_trajectories(&items, first.n_actions, first.state_dim())
    }

    pub fn n_trajectories(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn max_length(&self) -> usize {
        self.actions.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn exit_action(&self) -> usize {
        self.n_actions - 1
    }

    pub fn padding_action(&self) -> usize {
        self.n_actions
    }

    pub fn state_dim(&self) -> usize {
        self.states.dim().2
    }

    pub fn state(&self, t: usize, b: usize) -> Vec<i64> {
        self.states.slice(ndarray::s![t, b, ..]).to_vec()
    }

    pub fn trajectory(&self, b: usize) -> Trajectory {
        let len = self.lengths[b];
        Trajectory {
            states: (0..len).map(|t| self.state(t, b)).collect(),
            actions: (0..len).map(|t| self.actions[[t, b]]).collect(),
            log_reward: self.log_rewards[b],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Trajectory> + '_ {
        (0..self.n_trajectories()).map(|b| self.trajectory(b))
    }

    /// All states at time `t`, sinks included.
    pub fn states_at(&self, env: &dyn Env, t: usize) -> StateBatch {
        env.states(self.states.index_axis(Axis(0), t).to_owned())
    }

    /// The terminating state of every trajectory.
    pub fn last_states(&self, env: &dyn Env) -> Result<StateBatch> {
        let mut rows = Vec::with_capacity(self.n_trajectories());
        for (b, &len) in self.lengths.iter().enumerate() {
            if len == 0 {
                return Err(Error::EmptyTrajectory { index: b });
            }
            rows.push(self.state(len - 1, b));
        }
        Ok(states_from_rows(env, &rows, self.state_dim()))
    }

    /// One transition per action, trajectory-major then step-minor.
    pub fn to_transitions(&self, env: &dyn Env) -> Transitions {
        let dim = self.state_dim();
        let total: usize = self.lengths.iter().sum();
        let mut sources = Vec::with_capacity(total);
        let mut targets = Vec::with_capacity(total);
        let mut actions = Vec::with_capacity(total);
        let mut is_terminal = Vec::with_capacity(total);
        let mut log_rewards = Vec::with_capacity(total);
        let mut trajectory = Vec::with_capacity(total);
        let mut step = Vec::with_capacity(total);
        for (b, &len) in self.lengths.iter().enumerate() {
            for t in 0..len {
                let action = self.actions[[t, b]];
                let terminal = action == self.exit_action();
                sources.push(self.state(t, b));
                targets.push(self.state(t + 1, b));
                actions.push(action);
                is_terminal.push(terminal);
                log_rewards.push(terminal.then_some(self.log_rewards[b]));
                trajectory.push(b);
                step.push(t);
            }
        }
        Transitions {
            sources: states_from_rows(env, &sources, dim),
            targets: states_from_rows(env, &targets, dim),
            actions,
            is_terminal,
            log_rewards,
            trajectory,
            step,
        }
    }

    /// Debug dump, one JSON object per trajectory.
    pub fn write_json_lines<W: Write>(&self, mut out: W) -> Result<()> {
        for traj in self.iter() {
            serde_json::to_writer(&mut out, &traj)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Single edges taken from trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct Transitions {
    pub sources: StateBatch,
    pub actions: Vec<usize>,
    /// sf for terminal transitions.
    pub targets: StateBatch,
    pub is_terminal: Vec<bool>,
    /// Set exactly on terminal transitions.
    pub log_rewards: Vec<Option<f64>>,
    /// Originating trajectory and step, for bookkeeping.
    pub trajectory: Vec<usize>,
    pub step: Vec<usize>,
}

impl Transitions {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

pub(crate) fn states_from_rows(env: &dyn Env, rows: &[Vec<i64>], dim: usize) -> StateBatch {
    let flat: Vec<i64> = rows.iter().flatten().copied().collect();
    env.states(Array2::from_shape_vec((rows.len(), dim), flat).expect("rows have equal width"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::HyperGrid;

    fn traj(states: &[[i64; 2]], actions: &[usize], log_reward: f64) -> Trajectory {
        Trajectory { states: states.iter().map(|s| s.to_vec()).collect(), actions: actions.to_vec(), log_reward }
    }

    #[test]
    fn empty_batch_gives_empty_transitions() {
        let env = HyperGrid::new(2, 2, 0.1);
        let t = Trajectories::empty(3, 2);
        assert!(t.to_transitions(&env).is_empty());
        assert_eq!(Trajectories::from_trajectories(&[], 3, 2).unwrap(), t);
    }

    #[test]
    fn single_trajectory_transitions() {
        let env = HyperGrid::new(2, 2, 0.1);
        let t = Trajectories::from_trajectories(&[traj(&[[0, 0], [1, 0]], &[0, 2], 0.6f64.ln())], 3, 2).unwrap();
        let tr = t.to_transitions(&env);
        assert_eq!(tr.len(), 2);
        assert_eq!(tr.sources.state_vec(1), vec![1, 0]);
        assert_eq!(tr.targets.state_vec(0), vec![1, 0]);
        assert!(tr.targets.is_sink[1]);
        assert_eq!(tr.is_terminal, vec![false, true]);
        assert_eq!(tr.log_rewards, vec![None, Some(0.6f64.ln())]);
    }

    #[test]
    fn lengths_sum() {
        let env = HyperGrid::new(2, 4, 0.1);
        let a = traj(&[[0, 0]], &[2], 0.0);
        let b = traj(&[[0, 0], [1, 0], [1, 1]], &[0, 1, 2], 0.0);
        let t = Trajectories::from_trajectories(&[a, b], 3, 2).unwrap();
        assert_eq!(t.to_transitions(&env).len(), 4);
        assert_eq!(t.actions[[1, 0]], 3);
        assert!(t.state(1, 0).iter().all(|&c| c == SINK_FILL));
    }

    #[test]
    fn last_states() {
        let env = HyperGrid::new(2, 4, 0.1);
        let a = traj(&[[0, 0]], &[2], 0.0);
        let b = traj(&[[0, 0], [1, 0], [1, 1]], &[0, 1, 2], 0.0);
        let single = Trajectories::from_trajectories(&[a.clone()], 3, 2).unwrap();
        assert_eq!(single.last_states(&env).unwrap().state_vec(0), vec![0, 0]);
        let t = Trajectories::from_trajectories(&[a, b], 3, 2).unwrap();
        let last = t.last_states(&env).unwrap();
        assert_eq!(last.states, ndarray::array![[0, 0], [1, 1]]);
    }

    #[test]
    fn rejects_zero_length_and_missing_exit() {
        let bad = traj(&[[0, 0]], &[0], 0.0);
        assert!(Trajectories::from_trajectories(&[bad], 3, 2).is_err());
        let empty = Trajectory { states: vec![], actions: vec![], log_reward: 0.0 };
        assert!(matches!(
            Trajectories::from_trajectories(&[empty], 3, 2),
            Err(Error::EmptyTrajectory { index: 0 })
        ));
    }

    #[test]
    fn json_lines_dump() {
        let t = Trajectories::from_trajectories(&[traj(&[[0, 0]], &[2], -0.5)], 3, 2).unwrap();
        let mut buf = Vec::new();
        t.write_json_lines(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "{\"states\":[[0,0]],\"actions\":[2],\"log_reward\":-0.5}\n");
    }
}
