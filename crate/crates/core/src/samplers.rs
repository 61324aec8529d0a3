//! Action and trajectory samplers.
//!
//! Draws follow the behavior policy (temperature and uniform mixing applied),
//! while the returned log-probabilities are those of the untempered training
//! policy.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::containers::{ActionBatch, StateBatch, Trajectories, Trajectory};
use crate::env::Env;
use crate::error::{Error, Result};
use crate::estimators::{ForwardPolicy, LogitPbEstimator};
use crate::nn::{Graph, ParameterStore};
use crate::scalar::Scalar;

/// Draws an index from `probs` (which need not be exactly normalized).
fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            if u < p {
                return i;
            }
            u -= p;
            last = i;
        }
    }
    last
}

/// `(1 - ε) · softmax(logits / T) + ε · uniform` over the masked entries.
pub fn behavior_probs<S: Scalar>(logits: &[S], mask: &[bool], temperature: f64, epsilon: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l.as_f64() / temperature).collect();
    let max = scaled
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> =
        scaled.iter().zip(mask).map(|(&v, &m)| if m && max.is_finite() { (v - max).exp() } else { 0.0 }).collect();
    let total: f64 = weights.iter().sum();
    let k = mask.iter().filter(|&&m| m).count() as f64;
    weights
        .iter()
        .zip(mask)
        .map(|(&w, &m)| {
            if !m {
                0.0
            } else if total > 0.0 {
                (1.0 - epsilon) * w / total + epsilon / k
            } else {
                1.0 / k
            }
        })
        .collect()
}

fn check_knobs(temperature: f64, epsilon: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteActionsSampler {
    pub policy: ForwardPolicy,
    pub temperature: f64,
    pub epsilon: f64,
}

impl DiscreteActionsSampler {
    pub fn new(policy: ForwardPolicy) -> Self {
        Self { policy, temperature: 1.0, epsilon: 0.0 }
    }

    pub fn with_exploration(policy: ForwardPolicy, temperature: f64, epsilon: f64) -> Result<Self> {
        check_knobs(temperature, epsilon)?;
        Ok(Self { policy, temperature, epsilon })
    }

    /// One action per state and its training-policy log-probability.
    pub fn sample_actions<S: Scalar, R: Rng + ?Sized>(
        &self,
        store: &ParameterStore<S>,
        env: &dyn Env,
        states: &StateBatch,
        rng: &mut R,
    ) -> Result<(ActionBatch, Vec<S>)> {
        let mut g = Graph::new(store);
        let logits = self.policy.logits(&mut g, env, states)?;
        let log_probs = g.masked_log_softmax(logits, &states.forward_masks)?;
        let logits = g.value(logits);
        let log_probs = g.value(log_probs);
        let mut actions = Vec::with_capacity(states.len());
        let mut chosen = Vec::with_capacity(states.len());
        for b in 0..states.len() {
            let row = logits.row(b);
            let mask = states.forward_masks.row(b);
            let probs = behavior_probs(
                row.as_slice().expect("row-major logits"),
                mask.as_slice().expect("row-major mask"),
                self.temperature,
                self.epsilon,
            );
            let a = draw(&probs, rng);
            actions.push(a);
            chosen.push(log_probs[[b, a]]);
        }
        Ok((ActionBatch::new(actions, env.n_actions())?, chosen))
    }
}

/// Samples parents through a backward policy.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardDiscreteActionsSampler {
    pub estimator: LogitPbEstimator,
    pub temperature: f64,
}

impl BackwardDiscreteActionsSampler {
    pub fn new(estimator: LogitPbEstimator) -> Self {
        Self { estimator, temperature: 1.0 }
    }

    /// Backward action per state and its training-policy log-probability.
    pub fn sample_actions<S: Scalar, R: Rng + ?Sized>(
        &self,
        store: &ParameterStore<S>,
        env: &dyn Env,
        states: &StateBatch,
        rng: &mut R,
    ) -> Result<(Vec<usize>, Vec<S>)> {
        check_knobs(self.temperature, 0.0)?;
        let log_probs = self.estimator.eval_log_probs(store, env, states)?;
        let mut actions = Vec::with_capacity(states.len());
        let mut chosen = Vec::with_capacity(states.len());
        for b in 0..states.len() {
            let row = log_probs.row(b);
            let mask = states.backward_masks.row(b);
            let probs = behavior_probs(
                row.as_slice().expect("row-major"),
                mask.as_slice().expect("row-major"),
                self.temperature,
                0.0,
            );
            let a = draw(&probs, rng);
            actions.push(a);
            chosen.push(log_probs[[b, a]]);
        }
        Ok((actions, chosen))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Direction {
    Forward(DiscreteActionsSampler),
    Backward(BackwardDiscreteActionsSampler),
}

/// Samples complete trajectories, always stored in forward orientation.
#[derive(Clone, Debug)]
pub struct TrajectoriesSampler<'e> {
    pub env: &'e dyn Env,
    pub direction: Direction,
}

impl<'e> TrajectoriesSampler<'e> {
    pub fn forward(env: &'e dyn Env, sampler: DiscreteActionsSampler) -> Self {
        Self { env, direction: Direction::Forward(sampler) }
    }

    pub fn backward(env: &'e dyn Env, sampler: BackwardDiscreteActionsSampler) -> Self {
        Self { env, direction: Direction::Backward(sampler) }
    }

    /// `n` forward trajectories from s0.
    pub fn sample<S: Scalar, R: Rng + ?Sized>(
        &self,
        store: &ParameterStore<S>,
        n: usize,
        rng: &mut R,
    ) -> Result<Trajectories> {
        match &self.direction {
            Direction::Forward(_) => self.sample_from(store, &self.env.reset(n), rng),
            Direction::Backward(_) => Err(Error::Config("backward sampling needs explicit terminating states".into())),
        }
    }

    /// Forward: trajectories from `starts` until exit. Backward: walks from
    /// the terminating states `starts` to s0, reversed and closed with exit.
    pub fn sample_from<S: Scalar, R: Rng + ?Sized>(
        &self,
        store: &ParameterStore<S>,
        starts: &StateBatch,
        rng: &mut R,
    ) -> Result<Trajectories> {
        match &self.direction {
            Direction::Forward(s) => self.forward_from(s, store, starts, rng),
            Direction::Backward(s) => self.backward_from(s, store, starts, rng),
        }
    }

    fn forward_from<S: Scalar, R: Rng + ?Sized>(
        &self,
        sampler: &DiscreteActionsSampler,
        store: &ParameterStore<S>,
        starts: &StateBatch,
        rng: &mut R,
    ) -> Result<Trajectories> {
        let env = self.env;
        starts.ensure_no_sink()?;
        let b = starts.len();
        let exit = env.exit_action();
        let sentinel = env.n_actions();
        let mut current = starts.clone();
        let mut history = vec![current.states.clone()];
        let mut actions_hist: Vec<Vec<usize>> = Vec::new();
        let mut lengths = vec![0usize; b];
        let mut log_rewards = vec![0.0f64; b];
        let max_steps = env.max_depth() + 1;

        loop {
            let active: Vec<usize> = (0..b).filter(|&i| !current.is_sink[i]).collect();
            if active.is_empty() {
                break;
            }
            if actions_hist.len() >= max_steps {
                return Err(Error::InvalidState {
                    index: active[0],
                    reason: format!("trajectory exceeded {max_steps} steps"),
                });
            }
            let sub = current.select(&active);
            let (picked, _) = sampler.sample_actions(store, env, &sub, rng)?;
            let mut full = vec![exit; b];
            let mut stored = vec![sentinel; b];
            for (k, &i) in active.iter().enumerate() {
                let a = picked.as_slice()[k];
                full[i] = a;
                stored[i] = a;
                lengths[i] += 1;
                if a == exit {
                    log_rewards[i] = env.raw_log_reward(&current.state_vec(i));
                }
            }
            current = env.step(&current, &ActionBatch::new(full, env.n_actions())?)?;
            history.push(current.states.clone());
            actions_hist.push(stored);
        }

        let t_max = actions_hist.len();
        let views: Vec<_> = history.iter().map(|h| h.view()).collect();
        let states = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let mut actions = Array2::from_elem((t_max, b), sentinel);
        for (t, row) in actions_hist.into_iter().enumerate() {
            for (i, a) in row.into_iter().enumerate() {
                actions[[t, i]] = a;
            }
        }
        Trajectories::from_parts(states, actions, lengths, log_rewards, env.n_actions())
    }

    fn backward_from<S: Scalar, R: Rng + ?Sized>(
        &self,
        sampler: &BackwardDiscreteActionsSampler,
        store: &ParameterStore<S>,
        starts: &StateBatch,
        rng: &mut R,
    ) -> Result<Trajectories> {
        let env = self.env;
        let log_rewards = env.log_reward(starts)?;
        let b = starts.len();
        let mut paths: Vec<Vec<Vec<i64>>> = (0..b).map(|i| vec![starts.state_vec(i)]).collect();
        let mut forward_actions: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut current = starts.clone();
        loop {
            let active: Vec<usize> = (0..b).filter(|&i| !current.is_initial[i]).collect();
            if active.is_empty() {
                break;
            }
            let sub = current.select(&active);
            let (picked, _) = sampler.sample_actions(store, env, &sub, rng)?;
            let prev = env.backward_step(&sub, &picked)?;
            let mut rows = current.states.clone();
            for (k, &i) in active.iter().enumerate() {
                rows.row_mut(i).assign(&prev.state(k));
                paths[i].push(prev.state_vec(k));
                forward_actions[i].push(env.forward_action_of(picked[k]));
            }
            current = env.states(rows);
        }
        let items: Vec<Trajectory> = paths
            .into_iter()
            .zip(forward_actions)
            .zip(log_rewards)
            .map(|((mut states, mut actions), log_reward)| {
                states.reverse();
                actions.reverse();
                actions.push(env.exit_action());
                Trajectory { states, actions, log_reward }
            })
            .collect();
        Trajectories::from_trajectories(&items, env.n_actions(), env.state_dim())
    }
}

/// Empirical distribution of terminating-state indices.
pub fn terminating_state_frequencies(t: &Trajectories, env: &dyn Env) -> Result<BTreeMap<usize, f64>> {
    let last = t.last_states(env)?;
    let idx = env.get_terminating_states_indices(&last)?;
    let mut counts = BTreeMap::new();
    for i in &idx {
        *counts.entry(*i).or_insert(0usize) += 1;
    }
    let n = idx.len() as f64;
    Ok(counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect())
}

/// Frequencies as a dense vector over all terminating-state indices.
pub fn empirical_distribution(freqs: &BTreeMap<usize, f64>, n_terminating: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_terminating];
    for (&k, &p) in freqs {
        out[k] = p;
    }
    out
}
