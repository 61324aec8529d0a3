//! Parametrizations and the training losses they support.
//!
//! Every loss is a graph expression: residuals are squared in log space and
//! reduced by a mean, so [`Graph::backward`] yields the parameter gradients.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexSet;

use crate::containers::{StateBatch, Trajectories, Transitions};
use crate::env::Env;
use crate::error::{Error, Result};
use crate::estimators::{
    ForwardPolicy, LogEdgeFlowEstimator, LogStateFlowEstimator, LogZEstimator, LogitPbEstimator, LogitPfEstimator,
};
use crate::exact::{all_states, exact_pt};
use crate::nn::{Graph, ParamId, ParameterStore, SparseRows, Var};
use crate::scalar::Scalar;

pub const DEFAULT_SUBTB_LAMBDA: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    FM,
    DB,
    TB,
    SubTB,
    ZVar,
    ModifiedDB,
}

impl LossKind {
    pub const ALL: [LossKind; 6] =
        [LossKind::FM, LossKind::DB, LossKind::TB, LossKind::SubTB, LossKind::ZVar, LossKind::ModifiedDB];
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown loss {s:?}, expected one of FM, DB, TB, SubTB, ZVar, ModifiedDB")))
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::FM => "FM",
            LossKind::DB => "DB",
            LossKind::TB => "TB",
            LossKind::SubTB => "SubTB",
            LossKind::ZVar => "ZVar",
            LossKind::ModifiedDB => "ModifiedDB",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FmParametrization {
    pub edge_flows: LogEdgeFlowEstimator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DbParametrization {
    pub pf: LogitPfEstimator,
    pub pb: LogitPbEstimator,
    pub logf: LogStateFlowEstimator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TbParametrization {
    pub pf: LogitPfEstimator,
    pub pb: LogitPbEstimator,
    pub logz: LogZEstimator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubTbParametrization {
    pub pf: LogitPfEstimator,
    pub pb: LogitPbEstimator,
    pub logf: LogStateFlowEstimator,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZVarParametrization {
    pub pf: LogitPfEstimator,
    pub pb: LogitPbEstimator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModifiedDbParametrization {
    pub pf: LogitPfEstimator,
    pub pb: LogitPbEstimator,
}

/// A bundle of estimators together with the loss it is trained by.
#[derive(Clone, Debug, PartialEq)]
pub enum Parametrization {
    FM(FmParametrization),
    DB(DbParametrization),
    TB(TbParametrization),
    SubTB(SubTbParametrization),
    ZVar(ZVarParametrization),
    ModifiedDB(ModifiedDbParametrization),
}

impl Parametrization {
    pub fn kind(&self) -> LossKind {
        match self {
            Parametrization::FM(_) => LossKind::FM,
            Parametrization::DB(_) => LossKind::DB,
            Parametrization::TB(_) => LossKind::TB,
            Parametrization::SubTB(_) => LossKind::SubTB,
            Parametrization::ZVar(_) => LossKind::ZVar,
            Parametrization::ModifiedDB(_) => LossKind::ModifiedDB,
        }
    }

    /// The policy trajectories are sampled from; flow matching derives it
    /// from the edge flows.
    pub fn forward_policy(&self) -> ForwardPolicy {
        match self {
            Parametrization::FM(p) => ForwardPolicy::EdgeFlows(p.edge_flows.clone()),
            Parametrization::DB(p) => ForwardPolicy::Logits(p.pf.clone()),
            Parametrization::TB(p) => ForwardPolicy::Logits(p.pf.clone()),
            Parametrization::SubTB(p) => ForwardPolicy::Logits(p.pf.clone()),
            Parametrization::ZVar(p) => ForwardPolicy::Logits(p.pf.clone()),
            Parametrization::ModifiedDB(p) => ForwardPolicy::Logits(p.pf.clone()),
        }
    }

    /// Every parameter of every component, a shared torso counted once.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let ids: Vec<ParamId> = match self {
            Parametrization::FM(p) => p.edge_flows.param_ids(),
            Parametrization::DB(p) => [p.pf.param_ids(), p.pb.param_ids(), p.logf.param_ids()].concat(),
            Parametrization::TB(p) => [p.pf.param_ids(), p.pb.param_ids(), p.logz.param_ids()].concat(),
            Parametrization::SubTB(p) => [p.pf.param_ids(), p.pb.param_ids(), p.logf.param_ids()].concat(),
            Parametrization::ZVar(p) => [p.pf.param_ids(), p.pb.param_ids()].concat(),
            Parametrization::ModifiedDB(p) => [p.pf.param_ids(), p.pb.param_ids()].concat(),
        };
        ids.into_iter().collect::<IndexSet<_>>().into_iter().collect()
    }

    pub fn parameter_names<S: Scalar>(&self, store: &ParameterStore<S>) -> Vec<String> {
        self.param_ids().into_iter().map(|id| store.name(id).to_string()).collect()
    }

    /// The training loss on a batch of complete trajectories. Transition-based
    /// losses use every transition of the batch.
    pub fn loss<S: Scalar>(&self, g: &mut Graph<'_, S>, env: &dyn Env, t: &Trajectories) -> Result<Var> {
        match self {
            Parametrization::FM(p) => fm_loss(g, p, env, t),
            Parametrization::DB(p) => db_loss(g, p, env, &t.to_transitions(env)),
            Parametrization::TB(p) => tb_loss(g, p, env, t),
            Parametrization::SubTB(p) => subtb_loss(g, p, env, t),
            Parametrization::ZVar(p) => zvar_loss(g, p, env, t),
            Parametrization::ModifiedDB(p) => modified_db_loss(g, p, env, &t.to_transitions(env)),
        }
    }

    /// The parametrization's current estimate of `log Z`. Log-partition
    /// variance has no dedicated estimator and uses the batch mean of its
    /// per-trajectory estimates.
    pub fn log_z_estimate<S: Scalar>(&self, store: &ParameterStore<S>, env: &dyn Env, t: &Trajectories) -> Result<S> {
        let s0 = env.reset(1);
        let mut g = Graph::new(store);
        let v = match self {
            Parametrization::TB(p) => return Ok(p.logz.value(store)),
            Parametrization::DB(DbParametrization { logf, .. })
            | Parametrization::SubTB(SubTbParametrization { logf, .. }) => logf.log_flows(&mut g, env, &s0)?,
            Parametrization::FM(p) => {
                let flows = p.edge_flows.log_edge_flows(&mut g, env, &s0)?;
                g.masked_log_sum_exp(flows, &s0.forward_masks)?
            }
            Parametrization::ModifiedDB(p) => {
                let lp = p.pf.log_probs(&mut g, env, &s0)?;
                let exit = g.pick(lp, &[env.exit_action()])?;
                let log_r = g.scalar_constant(S::of(env.log_reward(&s0)?[0]));
                g.sub(log_r, exit)?
            }
            Parametrization::ZVar(p) => {
                let zeta = zeta(&mut g, &p.pf, &p.pb, env, t)?;
                g.mean(zeta)
            }
        };
        Ok(g.scalar(v))
    }

    /// `log Pi(τ)`: summed forward log-probabilities, exit step included.
    pub fn pi_log_prob<S: Scalar>(&self, store: &ParameterStore<S>, env: &dyn Env, t: &Trajectories) -> Result<Vec<S>> {
        let tr = t.to_transitions(env);
        let lp = self.forward_policy().eval_log_probs(store, env, &tr.sources)?;
        let mut out = vec![S::zero(); t.n_trajectories()];
        for (k, (&b, &a)) in tr.trajectory.iter().zip(&tr.actions).enumerate() {
            out[b] += lp[[k, a]];
        }
        Ok(out)
    }

    /// The exact terminating distribution of the forward policy, indexed by
    /// terminating-state index.
    pub fn p_t<S: Scalar>(&self, store: &ParameterStore<S>, env: &dyn Env, limit: usize) -> Result<Vec<S>> {
        let states = all_states(env, limit)?;
        let lp = self.forward_policy().eval_log_probs(store, env, &states)?;
        exact_pt(env, &lp, limit)
    }

    /// `log P_T(x)` for each terminating state in `states`.
    pub fn p_t_log_prob<S: Scalar>(
        &self,
        store: &ParameterStore<S>,
        env: &dyn Env,
        states: &StateBatch,
        limit: usize,
    ) -> Result<Vec<S>> {
        let pt = self.p_t(store, env, limit)?;
        Ok(env.get_terminating_states_indices(states)?.into_iter().map(|i| pt[i].ln()).collect())
    }
}

fn check_finite<S: Scalar>(g: &Graph<'_, S>, v: Var, owner: impl Fn(usize) -> String) -> Result<()> {
    match g.value(v).iter().position(|x| !x.is_finite()) {
        Some(r) => Err(Error::NonFinite { what: format!("residual of {}", owner(r)) }),
        None => Ok(()),
    }
}

fn indicator_rows<S: Scalar>(n_rows: usize, members: impl Iterator<Item = (usize, usize)>) -> SparseRows<S> {
    let mut rows = vec![Vec::new(); n_rows];
    for (row, col) in members {
        rows[row].push((col, S::one()));
    }
    SparseRows { rows }
}

/// Per-transition `log P_F(s'|s)` and `log P_B(s|s')`, the latter zero on
/// exit transitions.
fn step_log_probs<S: Scalar>(
    g: &mut Graph<'_, S>,
    pf: &LogitPfEstimator,
    pb: &LogitPbEstimator,
    env: &dyn Env,
    tr: &Transitions,
) -> Result<(Var, Var)> {
    let n = tr.len();
    let lp = pf.log_probs(g, env, &tr.sources)?;
    let log_pf = g.pick(lp, &tr.actions)?;
    let inner: Vec<usize> = (0..n).filter(|&i| !tr.is_terminal[i]).collect();
    if inner.is_empty() {
        return Ok((log_pf, g.column_constant(&vec![S::zero(); n])));
    }
    let lpb = pb.log_probs(g, env, &tr.targets.select(&inner))?;
    let back: Vec<usize> = inner.iter().map(|&i| env.backward_action_of(tr.actions[i])).collect();
    let picked = g.pick(lpb, &back)?;
    let spread = indicator_rows(n, inner.iter().enumerate().map(|(k, &i)| (i, k)));
    let log_pb = g.linear(picked, spread)?;
    Ok((log_pf, log_pb))
}

fn ensure_complete(t: &Trajectories) -> Result<()> {
    match t.lengths.iter().position(|&l| l == 0) {
        Some(index) => Err(Error::EmptyTrajectory { index }),
        None => Ok(()),
    }
}

fn log_rewards<S: Scalar>(t: &Trajectories) -> Vec<S> {
    t.log_rewards.iter().map(|&r| S::of(r)).collect()
}

/// Trajectory balance:
/// `(log Z + Σ log P_F - log R(x) - Σ log P_B)²`, averaged over the batch.
pub fn tb_loss<S: Scalar>(g: &mut Graph<'_, S>, p: &TbParametrization, env: &dyn Env, t: &Trajectories) -> Result<Var> {
    ensure_complete(t)?;
    let tr = t.to_transitions(env);
    let (log_pf, log_pb) = step_log_probs(g, &p.pf, &p.pb, env, &tr)?;
    let diff = g.sub(log_pf, log_pb)?;
    let per_traj = indicator_rows(t.n_trajectories(), tr.trajectory.iter().copied().enumerate().map(|(k, b)| (b, k)));
    let sums = g.linear(diff, per_traj)?;
    let logz = p.logz.var(g);
    let broadcast = indicator_rows(t.n_trajectories(), (0..t.n_trajectories()).map(|b| (b, 0)));
    let logz = g.linear(logz, broadcast)?;
    let log_r = g.column_constant(&log_rewards::<S>(t));
    let lhs = g.add(logz, sums)?;
    let residual = g.sub(lhs, log_r)?;
    check_finite(g, residual, |b| format!("trajectory {b}"))?;
    let sq = g.square(residual);
    Ok(g.mean(sq))
}

fn db_residuals<S: Scalar>(
    g: &mut Graph<'_, S>,
    p: &DbParametrization,
    env: &dyn Env,
    tr: &Transitions,
) -> Result<Var> {
    let n = tr.len();
    let (log_pf, log_pb) = step_log_probs(g, &p.pf, &p.pb, env, tr)?;
    let log_f = p.logf.log_flows(g, env, &tr.sources)?;
    let inner: Vec<usize> = (0..n).filter(|&i| !tr.is_terminal[i]).collect();
    let mut target = g.column_constant(
        &tr.log_rewards.iter().map(|r| r.map_or(S::zero(), S::of)).collect::<Vec<_>>(),
    );
    if !inner.is_empty() {
        let next = p.logf.log_flows(g, env, &tr.targets.select(&inner))?;
        let spread = indicator_rows(n, inner.iter().enumerate().map(|(k, &i)| (i, k)));
        let next = g.linear(next, spread)?;
        target = g.add(target, next)?;
    }
    let lhs = g.add(log_f, log_pf)?;
    let rhs = g.add(target, log_pb)?;
    let residual = g.sub(lhs, rhs)?;
    check_finite(g, residual, |i| format!("trajectory {} at step {}", tr.trajectory[i], tr.step[i]))?;
    Ok(residual)
}

/// Detailed balance over single transitions; terminal transitions compare
/// `log F(s) + log P_F(sf|s)` with `log R(s)`.
pub fn db_loss<S: Scalar>(g: &mut Graph<'_, S>, p: &DbParametrization, env: &dyn Env, tr: &Transitions) -> Result<Var> {
    let residual = db_residuals(g, p, env, tr)?;
    let sq = g.square(residual);
    Ok(g.mean(sq))
}

/// Detailed balance with `F(s) ∝ R(s) / P_F(sf|s)` substituted, over the
/// non-terminal transitions. Zero when there are none.
pub fn modified_db_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    p: &ModifiedDbParametrization,
    env: &dyn Env,
    tr: &Transitions,
) -> Result<Var> {
    if !env.all_states_terminating() {
        return Err(Error::Incompatible(format!(
            "modified detailed balance needs every state to be terminating, {} has non-terminating states",
            env.name()
        )));
    }
    let inner: Vec<usize> = (0..tr.len()).filter(|&i| !tr.is_terminal[i]).collect();
    if inner.is_empty() {
        return Ok(g.scalar_constant(S::zero()));
    }
    let exit = vec![env.exit_action(); inner.len()];
    let src = tr.sources.select(&inner);
    let tgt = tr.targets.select(&inner);
    let actions: Vec<usize> = inner.iter().map(|&i| tr.actions[i]).collect();
    let back: Vec<usize> = actions.iter().map(|&a| env.backward_action_of(a)).collect();

    let lp_src = p.pf.log_probs(g, env, &src)?;
    let step = g.pick(lp_src, &actions)?;
    let exit_src = g.pick(lp_src, &exit)?;
    let lp_tgt = p.pf.log_probs(g, env, &tgt)?;
    let exit_tgt = g.pick(lp_tgt, &exit)?;
    let lpb = p.pb.log_probs(g, env, &tgt)?;
    let log_pb = g.pick(lpb, &back)?;
    let r_src = env.log_reward(&src)?;
    let r_tgt = env.log_reward(&tgt)?;
    let delta: Vec<S> = r_src.iter().zip(&r_tgt).map(|(&a, &b)| S::of(a - b)).collect();
    let delta = g.column_constant(&delta);

    let fwd = g.add(step, exit_tgt)?;
    let fwd = g.add(fwd, delta)?;
    let bwd = g.add(log_pb, exit_src)?;
    let residual = g.sub(fwd, bwd)?;
    check_finite(g, residual, |k| format!("trajectory {} at step {}", tr.trajectory[inner[k]], tr.step[inner[k]]))?;
    let sq = g.square(residual);
    Ok(g.mean(sq))
}

/// Flow matching over the distinct non-initial states visited by the batch,
/// plus a reward-matching term over the distinct terminating states.
pub fn fm_loss<S: Scalar>(g: &mut Graph<'_, S>, p: &FmParametrization, env: &dyn Env, t: &Trajectories) -> Result<Var> {
    ensure_complete(t)?;
    let mut visited = IndexSet::new();
    let mut terminating = IndexSet::new();
    for b in 0..t.n_trajectories() {
        let len = t.lengths[b];
        for step in 1..len {
            visited.insert(t.state(step, b));
        }
        terminating.insert(t.state(len - 1, b));
    }
    let visited: Vec<Vec<i64>> = visited.into_iter().collect();
    let terminating: Vec<Vec<i64>> = terminating.into_iter().collect();

    let matching = if visited.is_empty() {
        g.scalar_constant(S::zero())
    } else {
        let states = env.states_from_vecs(&visited);
        let out_flows = p.edge_flows.log_edge_flows(g, env, &states)?;
        let outflow = g.masked_log_sum_exp(out_flows, &states.forward_masks)?;
        let mut parents = Vec::new();
        let mut cols = Vec::new();
        let mut segments = Vec::new();
        for (k, s) in visited.iter().enumerate() {
            for (a, parent) in env.parents(s) {
                parents.push(parent);
                cols.push(a);
                segments.push(k);
            }
        }
        let parent_states = env.states_from_vecs(&parents);
        let in_flows = p.edge_flows.log_edge_flows(g, env, &parent_states)?;
        let in_edges = g.pick(in_flows, &cols)?;
        let inflow = g.segment_log_sum_exp(in_edges, &segments, visited.len())?;
        let residual = g.sub(inflow, outflow)?;
        check_finite(g, residual, |k| format!("state {:?}", visited[k]))?;
        let sq = g.square(residual);
        g.mean(sq)
    };

    let states = env.states_from_vecs(&terminating);
    let flows = p.edge_flows.log_edge_flows(g, env, &states)?;
    let exit_flow = g.pick(flows, &vec![env.exit_action(); terminating.len()])?;
    let log_r: Vec<S> = env.log_reward(&states)?.into_iter().map(S::of).collect();
    let log_r = g.column_constant(&log_r);
    let residual = g.sub(exit_flow, log_r)?;
    check_finite(g, residual, |k| format!("terminating state {:?}", terminating[k]))?;
    let sq = g.square(residual);
    let reward = g.mean(sq);
    g.add(matching, reward)
}

/// Sub-trajectory residuals `A_ij` for `0 ≤ i < j ≤ n`, where position `n`
/// stands for the sink with `log F := log R(x)` and the exit step's forward
/// log-probability enters the sums. Returns the residual column and, per
/// row, `(trajectory, i, j, n)`.
fn subtb_residuals<S: Scalar>(
    g: &mut Graph<'_, S>,
    p: &SubTbParametrization,
    env: &dyn Env,
    t: &Trajectories,
) -> Result<(Var, Vec<(usize, usize, usize, usize)>)> {
    ensure_complete(t)?;
    let tr = t.to_transitions(env);
    let n_tr = tr.len();
    let (log_pf, log_pb) = step_log_probs(g, &p.pf, &p.pb, env, &tr)?;
    let d = g.sub(log_pf, log_pb)?;
    let log_f = p.logf.log_flows(g, env, &tr.sources)?;
    let x = g.concat(&[log_f, d])?;

    let mut rows = Vec::new();
    let mut offsets = Vec::new();
    let mut pairs = Vec::new();
    let mut offset = 0;
    for (b, &len) in t.lengths.iter().enumerate() {
        for i in 0..len {
            for j in i + 1..=len {
                let mut row = vec![(offset + i, S::one())];
                row.extend((i..j).map(|s| (n_tr + offset + s, S::one())));
                if j < len {
                    row.push((offset + j, -S::one()));
                    offsets.push(S::zero());
                } else {
                    offsets.push(-S::of(t.log_rewards[b]));
                }
                rows.push(row);
                pairs.push((b, i, j, len));
            }
        }
        offset += len;
    }
    let a = g.linear(x, SparseRows { rows })?;
    let c = g.column_constant(&offsets);
    let residual = g.add(a, c)?;
    check_finite(g, residual, |k| format!("trajectory {} between positions {} and {}", pairs[k].0, pairs[k].1, pairs[k].2))?;
    Ok((residual, pairs))
}

/// Weighted mean of squared sub-trajectory residuals; `weight(i, j, n)` is
/// normalized within each trajectory, then trajectories are averaged.
fn subtb_weighted<S: Scalar>(
    g: &mut Graph<'_, S>,
    p: &SubTbParametrization,
    env: &dyn Env,
    t: &Trajectories,
    weight: impl Fn(usize, usize, usize) -> f64,
) -> Result<Var> {
    let (residual, pairs) = subtb_residuals(g, p, env, t)?;
    let mut totals = vec![0.0; t.n_trajectories()];
    for &(b, i, j, n) in &pairs {
        totals[b] += weight(i, j, n);
    }
    let batch = t.n_trajectories() as f64;
    let row: Vec<(usize, S)> = pairs
        .iter()
        .enumerate()
        .map(|(k, &(b, i, j, n))| (k, S::of(weight(i, j, n) / totals[b] / batch)))
        .collect();
    let sq = g.square(residual);
    g.linear(sq, SparseRows { rows: vec![row] })
}

/// Sub-trajectory balance with geometric weights `λ^(j-i)` normalized within
/// each trajectory.
pub fn subtb_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    p: &SubTbParametrization,
    env: &dyn Env,
    t: &Trajectories,
) -> Result<Var> {
    if !(p.lambda > 0.0 && p.lambda <= 1.0) {
        return Err(Error::Config(format!("SubTB lambda must lie in (0, 1], got {}", p.lambda)));
    }
    let lambda = p.lambda;
    subtb_weighted(g, p, env, t, |i, j, _| lambda.powi((j - i) as i32))
}

/// `ζ(τ) = log R(x) + Σ log P_B - Σ log P_F` per trajectory.
fn zeta<S: Scalar>(
    g: &mut Graph<'_, S>,
    pf: &LogitPfEstimator,
    pb: &LogitPbEstimator,
    env: &dyn Env,
    t: &Trajectories,
) -> Result<Var> {
    ensure_complete(t)?;
    let tr = t.to_transitions(env);
    let (log_pf, log_pb) = step_log_probs(g, pf, pb, env, &tr)?;
    let d = g.sub(log_pb, log_pf)?;
    let per_traj = indicator_rows(t.n_trajectories(), tr.trajectory.iter().copied().enumerate().map(|(k, b)| (b, k)));
    let sums = g.linear(d, per_traj)?;
    let log_r = g.column_constant(&log_rewards::<S>(t));
    let z = g.add(sums, log_r)?;
    check_finite(g, z, |b| format!("trajectory {b}"))?;
    Ok(z)
}

/// Population variance of a column.
fn variance<S: Scalar>(g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
    let n = g.value(x).nrows();
    let inv = S::one() / S::of(n as f64);
    let centered = SparseRows {
        rows: (0..n)
            .map(|r| (0..n).map(|c| (c, if r == c { S::one() - inv } else { -inv })).collect())
            .collect(),
    };
    let c = g.linear(x, centered)?;
    let sq = g.square(c);
    Ok(g.mean(sq))
}

/// Log-partition variance: the batch variance of `ζ`.
pub fn zvar_loss<S: Scalar>(g: &mut Graph<'_, S>, p: &ZVarParametrization, env: &dyn Env, t: &Trajectories) -> Result<Var> {
    if t.n_trajectories() < 2 {
        return Err(Error::BatchTooSmall { got: t.n_trajectories(), need: 2 });
    }
    let z = zeta(g, &p.pf, &p.pb, env, t)?;
    variance(g, z)
}
