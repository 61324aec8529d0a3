//! Exact quantities for enumerable environments: the target distribution,
//! edge flows propagated backward from the rewards, the terminating
//! distribution of a forward policy, and distribution distances.

use std::io::Write;

use ndarray::Array2;
use serde::Serialize;

use crate::containers::StateBatch;
use crate::env::Env;
use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};

/// Every state of `env` in index order.
pub fn all_states(env: &dyn Env, limit: usize) -> Result<StateBatch> {
    let n = env.enumerable_states(limit)?;
    let rows: Vec<Vec<i64>> = (0..n).map(|i| env.state_from_index(i)).collect();
    Ok(env.states_from_vecs(&rows))
}

/// State indices sorted by increasing depth (a topological order).
fn depth_order(env: &dyn Env, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| env.depth(&env.state_from_index(i)));
    order
}

/// `R(x)/Z` over terminating-state indices, and `log Z`.
pub fn true_distribution<S: Scalar>(env: &dyn Env, limit: usize) -> Result<(Vec<S>, S)> {
    let n = match env.n_terminating_states() {
        Some(n) if n <= limit => n,
        other => {
            return Err(Error::EnumerationBound { n_states: other.map_or(u128::MAX, |n| n as u128), limit })
        }
    };
    let log_r: Vec<S> =
        (0..n).map(|i| S::of(env.raw_log_reward(&env.terminating_state_from_index(i)))).collect();
    let log_z = log_sum_exp(log_r.iter().copied());
    Ok((log_r.into_iter().map(|lr| (lr - log_z).exp()).collect(), log_z))
}

/// Ground-truth flows of an enumerable environment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactTables<S> {
    pub n_states: usize,
    /// Probability per terminating-state index.
    pub true_dist: Vec<S>,
    pub true_log_z: S,
    /// `n_states × n_actions`; `edge_flows[s, a] = F(s → child_a(s))`, the
    /// exit column holds `R(s)` and disallowed actions hold zero.
    pub edge_flows: Array2<S>,
    /// `F(s)` per state index.
    pub state_flows: Vec<S>,
}

/// Propagates rewards backward through the DAG, visiting each edge once:
///
/// ```text
/// F(s)      = R(s)·1[s terminating] + Σ_{s' child of s} F(s → s')
/// F(s → s') = F(s') · P_B(s | s')
/// ```
///
/// `pb_log_probs` is `n_states × (n_actions - 1)`, indexed by state; `None`
/// means uniform over parents.
pub fn dp_edge_flows<S: Scalar>(
    env: &dyn Env,
    pb_log_probs: Option<&Array2<S>>,
    limit: usize,
) -> Result<ExactTables<S>> {
    let n = env.enumerable_states(limit)?;
    let n_actions = env.n_actions();
    let exit = env.exit_action();
    if let Some(pb) = pb_log_probs {
        if pb.dim() != (n, n_actions - 1) {
            return Err(Error::Shape(format!("PB table {:?}, expected {:?}", pb.dim(), (n, n_actions - 1))));
        }
    }
    let mut edge_flows = Array2::zeros((n, n_actions));
    let mut state_flows = vec![S::zero(); n];
    for &s in depth_order(env, n).iter().rev() {
        let state = env.state_from_index(s);
        let mut total = S::zero();
        if env.is_terminating(&state) {
            let r = S::of(env.raw_log_reward(&state)).exp();
            edge_flows[[s, exit]] = r;
            total += r;
        }
        for (a, child) in env.children(&state) {
            let c = env.raw_state_index(&child);
            let pb = match pb_log_probs {
                Some(table) => table[[c, env.backward_action_of(a)]].exp(),
                None => S::one() / S::of(env.parents(&child).len() as f64),
            };
            let flow = state_flows[c] * pb;
            edge_flows[[s, a]] = flow;
            total += flow;
        }
        state_flows[s] = total;
    }
    let (true_dist, true_log_z) = true_distribution(env, limit)?;
    Ok(ExactTables { n_states: n, true_dist, true_log_z, edge_flows, state_flows })
}

impl<S: Scalar> ExactTables<S> {
    pub fn log_z_from_flows(&self, env: &dyn Env) -> S {
        self.state_flows[env.raw_state_index(&env.s0())].ln()
    }

    /// `log P_F(s'|s) = log F(s → s') - log F(s)`, `-inf` where disallowed.
    pub fn pf_log_probs(&self, env: &dyn Env) -> Array2<S> {
        let mut out = Array2::from_elem(self.edge_flows.dim(), S::neg_infinity());
        for s in 0..self.n_states {
            let (fwd, _) = env.masks_of(&env.state_from_index(s));
            let log_f = self.state_flows[s].ln();
            for (a, allowed) in fwd.into_iter().enumerate() {
                if allowed {
                    out[[s, a]] = self.edge_flows[[s, a]].ln() - log_f;
                }
            }
        }
        out
    }

    /// `log P_B(s|s') = log F(s → s') - log F(s')` indexed by `s'`, `-inf`
    /// where disallowed and on s0.
    pub fn pb_log_probs(&self, env: &dyn Env) -> Array2<S> {
        let mut out = Array2::from_elem((self.n_states, env.n_actions() - 1), S::neg_infinity());
        for c in 0..self.n_states {
            let child = env.state_from_index(c);
            let log_f = self.state_flows[c].ln();
            for (a, parent) in env.parents(&child) {
                let p = env.raw_state_index(&parent);
                out[[c, env.backward_action_of(a)]] = self.edge_flows[[p, a]].ln() - log_f;
            }
        }
        out
    }

    pub fn log_edge_flows(&self) -> Array2<S> {
        self.edge_flows.mapv(|f| f.ln())
    }

    pub fn log_state_flows(&self) -> Vec<S> {
        self.state_flows.iter().map(|f| f.ln()).collect()
    }

    pub fn write_json<W: Write>(&self, env: &dyn Env, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct StateRecord {
            index: usize,
            state: Vec<i64>,
            flow: f64,
            edge_flows: Vec<f64>,
        }
        #[derive(Serialize)]
        struct Export {
            env: String,
            true_log_z: f64,
            true_dist: Vec<f64>,
            states: Vec<StateRecord>,
        }
        let export = Export {
            env: env.name().to_string(),
            true_log_z: self.true_log_z.as_f64(),
            true_dist: self.true_dist.iter().map(|p| p.as_f64()).collect(),
            states: (0..self.n_states)
                .map(|i| StateRecord {
                    index: i,
                    state: env.state_from_index(i),
                    flow: self.state_flows[i].as_f64(),
                    edge_flows: self.edge_flows.row(i).iter().map(|f| f.as_f64()).collect(),
                })
                .collect(),
        };
        serde_json::to_writer(out, &export)?;
        Ok(())
    }
}

/// Terminating distribution of a forward policy by forward dynamic
/// programming in topological order:
///
/// ```text
/// u(s0) = 1,  u(s') = Σ_{s parent of s'} u(s) · P_F(s'|s),  P_T(x) = u(x) · P_F(exit|x)
/// ```
///
/// `pf_log_probs` is `n_states × n_actions`, indexed by state.
pub fn exact_pt<S: Scalar>(env: &dyn Env, pf_log_probs: &Array2<S>, limit: usize) -> Result<Vec<S>> {
    let n = env.enumerable_states(limit)?;
    if pf_log_probs.dim() != (n, env.n_actions()) {
        return Err(Error::Shape(format!("PF table {:?}, expected {:?}", pf_log_probs.dim(), (n, env.n_actions()))));
    }
    let n_term = env.n_terminating_states().ok_or(Error::NotEnumerable)?;
    let exit = env.exit_action();
    let mut reach = vec![S::zero(); n];
    reach[env.raw_state_index(&env.s0())] = S::one();
    let mut pt = vec![S::zero(); n_term];
    for s in depth_order(env, n) {
        if reach[s] == S::zero() {
            continue;
        }
        let state = env.state_from_index(s);
        for (a, child) in env.children(&state) {
            let c = env.raw_state_index(&child);
            let add = reach[s] * pf_log_probs[[s, a]].exp();
            reach[c] += add;
        }
        if let Some(t) = env.raw_terminating_index(&state) {
            pt[t] = reach[s] * pf_log_probs[[s, exit]].exp();
        }
    }
    Ok(pt)
}

/// `Σ_x |p(x) - q(x)|`.
pub fn l1_distance<S: Scalar>(p: &[S], q: &[S]) -> Result<S> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("distributions over {} and {} outcomes", p.len(), q.len())));
    }
    Ok(p.iter().zip(q).map(|(&a, &b)| (a - b).abs()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{DiscreteEbm, HyperGrid, DEFAULT_ENUMERATION_LIMIT as LIMIT};

    /// Maximum |in-flow - out-flow| over non-initial states, computed from
    /// parent enumeration independently of the sweep.
    fn flow_matching_gap(env: &dyn Env, t: &ExactTables<f64>) -> f64 {
        let s0 = env.raw_state_index(&env.s0());
        (0..t.n_states)
            .filter(|&s| s != s0)
            .map(|s| {
                let state = env.state_from_index(s);
                let inflow: f64 = env
                    .parents(&state)
                    .iter()
                    .map(|(a, p)| t.edge_flows[[env.raw_state_index(p), *a]])
                    .sum();
                let outflow: f64 = t.edge_flows.row(s).sum();
                (inflow - outflow).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn true_distribution_small_grid() {
        let env = HyperGrid::new(2, 2, 0.1);
        let (dist, log_z) = true_distribution::<f64>(&env, LIMIT).unwrap();
        for p in &dist {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert!((log_z - 2.4f64.ln()).abs() < 1e-15);
        assert!((log_z - 0.875469).abs() < 1e-6);
    }

    #[test]
    fn true_distribution_ebm() {
        let env = DiscreteEbm::new(2, 0.5);
        let (dist, _) = true_distribution::<f64>(&env, LIMIT).unwrap();
        let w = [0.5f64.exp(), (-0.5f64).exp(), (-0.5f64).exp(), 0.5f64.exp()];
        let z: f64 = w.iter().sum();
        for (i, p) in dist.iter().enumerate() {
            assert!((p - w[i] / z).abs() < 1e-15, "{i}");
        }
    }

    /// One state, which can only exit.
    #[derive(Debug)]
    struct Point;

    impl Env for Point {
        fn name(&self) -> &str {
            "Point"
        }
        fn n_actions(&self) -> usize {
            1
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn s0(&self) -> Vec<i64> {
            vec![0]
        }
        fn maskless_step(&self, _: &mut [i64], _: usize) {}
        fn maskless_backward_step(&self, _: &mut [i64], _: usize) {}
        fn fill_masks(&self, _: &[i64], forward: &mut [bool], _: &mut [bool]) {
            forward[0] = true;
        }
        fn raw_log_reward(&self, _: &[i64]) -> f64 {
            -3.0
        }
        fn is_valid_state(&self, state: &[i64]) -> bool {
            state == [0]
        }
        fn all_states_terminating(&self) -> bool {
            true
        }
        fn depth(&self, _: &[i64]) -> usize {
            0
        }
        fn max_depth(&self) -> usize {
            0
        }
        fn n_states(&self) -> Option<usize> {
            Some(1)
        }
        fn raw_state_index(&self, _: &[i64]) -> usize {
            0
        }
        fn state_from_index(&self, _: usize) -> Vec<i64> {
            vec![0]
        }
        fn n_terminating_states(&self) -> Option<usize> {
            Some(1)
        }
        fn raw_terminating_index(&self, _: &[i64]) -> Option<usize> {
            Some(0)
        }
        fn terminating_state_from_index(&self, _: usize) -> Vec<i64> {
            vec![0]
        }
        fn default_preprocessor(&self) -> crate::env::Preprocessor {
            crate::env::Preprocessor::Identity
        }
    }

    #[test]
    fn single_terminating_state() {
        let (dist, log_z) = true_distribution::<f64>(&Point, LIMIT).unwrap();
        assert_eq!(dist, vec![1.0]);
        assert_eq!(log_z, -3.0);
        let t = dp_edge_flows::<f64>(&Point, None, LIMIT).unwrap();
        assert!((t.state_flows[0] - (-3.0f64).exp()).abs() < 1e-18);
    }

    #[test]
    fn dp_hand_values() {
        let env = HyperGrid::new(2, 2, 0.1);
        let t = dp_edge_flows::<f64>(&env, None, LIMIT).unwrap();
        let f = |s: [i64; 2]| t.state_flows[env.raw_state_index(&s)];
        assert!((f([1, 1]) - 0.6).abs() < 1e-15);
        assert!((f([1, 0]) - 0.9).abs() < 1e-15);
        assert!((f([0, 1]) - 0.9).abs() < 1e-15);
        assert!((f([0, 0]) - 2.4).abs() < 1e-15);
        assert!((t.edge_flows[[1, 1]] - 0.3).abs() < 1e-15);
        assert!((t.edge_flows[[1, 2]] - 0.6).abs() < 1e-15);
        assert!(flow_matching_gap(&env, &t) < 1e-12);
    }

    #[test]
    fn dp_flow_matching_across_environments() {
        for ndim in 1..=3 {
            for height in [2, 3, 5, 8] {
                let env = HyperGrid::new(ndim, height, 0.01);
                let t = dp_edge_flows::<f64>(&env, None, LIMIT).unwrap();
                assert!(flow_matching_gap(&env, &t) < 1e-12 * t.true_log_z.exp().max(1.0));
                assert!((t.log_z_from_flows(&env) - t.true_log_z).abs() < 1e-12);
            }
        }
        for n in 1..=8 {
            let env = DiscreteEbm::new(n, 0.7);
            let t = dp_edge_flows::<f64>(&env, None, LIMIT).unwrap();
            assert!(flow_matching_gap(&env, &t) < 1e-10);
            assert!((t.log_z_from_flows(&env) - t.true_log_z).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_pb_gives_in_tree() {
        // PB always picks the parent reached by decrementing the lowest
        // non-zero coordinate.
        let env = HyperGrid::new(2, 3, 0.1);
        let n = env.n_states().unwrap();
        let mut pb = Array2::from_elem((n, 2), f64::NEG_INFINITY);
        for i in 0..n {
            let s = env.state_from_index(i);
            if let Some(d) = s.iter().position(|&c| c > 0) {
                pb[[i, d]] = 0.0;
            }
        }
        let t = dp_edge_flows(&env, Some(&pb), LIMIT).unwrap();
        // (1,1) keeps only the parent (0,1), so (1,0) -> (1,1) is off-tree.
        let from = env.raw_state_index(&[1, 0]);
        assert_eq!(t.edge_flows[[from, 1]], 0.0);
        let from = env.raw_state_index(&[0, 1]);
        assert!(t.edge_flows[[from, 0]] > 0.0);
        assert!(flow_matching_gap(&env, &t) < 1e-12);
    }

    #[test]
    fn exact_pt_uniform_grid() {
        let env = HyperGrid::new(2, 2, 0.1);
        let n = 4;
        let mut pf = Array2::from_elem((n, 3), f64::NEG_INFINITY);
        for i in 0..n {
            let (fwd, _) = env.masks_of(&env.state_from_index(i));
            let k = fwd.iter().filter(|&&m| m).count() as f64;
            for (a, m) in fwd.iter().enumerate() {
                if *m {
                    pf[[i, a]] = -k.ln();
                }
            }
        }
        let pt = exact_pt(&env, &pf, LIMIT).unwrap();
        let expected = [1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0];
        for (p, e) in pt.iter().zip(expected) {
            assert!((p - e).abs() < 1e-12);
        }
        let (truth, _) = true_distribution::<f64>(&env, LIMIT).unwrap();
        assert!((l1_distance(&pt, &truth).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn policy_from_flows_recovers_truth() {
        for env in [Box::new(HyperGrid::new(3, 4, 0.05)) as Box<dyn Env>, Box::new(DiscreteEbm::new(4, 1.3))] {
            let t = dp_edge_flows::<f64>(env.as_ref(), None, LIMIT).unwrap();
            let pt = exact_pt(env.as_ref(), &t.pf_log_probs(env.as_ref()), LIMIT).unwrap();
            assert!(l1_distance(&pt, &t.true_dist).unwrap() < 1e-12);
            assert!((pt.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_exit_at_s0() {
        let env = HyperGrid::new(2, 3, 0.1);
        let mut pf = Array2::from_elem((9, 3), f64::NEG_INFINITY);
        pf.column_mut(2).fill(0.0);
        let pt = exact_pt(&env, &pf, LIMIT).unwrap();
        assert_eq!(pt[0], 1.0);
        assert_eq!(pt.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn l1_edge_cases() {
        assert_eq!(l1_distance(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_eq!(l1_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert!(l1_distance(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn enumeration_bound() {
        let env = HyperGrid::new(4, 40, 0.1);
        assert!(matches!(dp_edge_flows::<f64>(&env, None, 1000), Err(Error::EnumerationBound { .. })));
        assert!(matches!(true_distribution::<f64>(&env, 1000), Err(Error::EnumerationBound { .. })));
    }

    #[test]
    fn json_export() {
        let env = HyperGrid::new(2, 2, 0.1);
        let t = dp_edge_flows::<f64>(&env, None, LIMIT).unwrap();
        let mut buf = Vec::new();
        t.write_json(&env, &mut buf).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["states"].as_array().unwrap().len(), 4);
        assert_eq!(v["states"][0]["flow"].as_f64().unwrap(), t.state_flows[0]);
    }
}
