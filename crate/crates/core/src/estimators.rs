//! Estimators: modules applied to preprocessed states, producing log-flows or
//! masked log-probabilities.
//!
//! Every estimator takes a [`StateBatch`], so the masks travel with the
//! states. Masked log-probabilities are exactly `-inf`.

use ndarray::Array2;
use rand::Rng;

use crate::containers::StateBatch;
use crate::env::{Env, Preprocessor};
use crate::error::{Error, Result};
use crate::nn::{Graph, Module, ModuleInput, ModuleKind, NeuralNetConfig, ParamId, ParameterStore, Torso, Var};
use crate::scalar::Scalar;

/// Builds a module of `kind` with `output_dim` outputs for states of `env`.
#[allow(clippy::too_many_arguments)]
pub fn build_module<S: Scalar, R: Rng + ?Sized>(
    kind: ModuleKind,
    store: &mut ParameterStore<S>,
    prefix: &str,
    env: &dyn Env,
    preprocessor: Preprocessor,
    output_dim: usize,
    config: &NeuralNetConfig,
    shared_torso: Option<&Torso>,
    rng: &mut R,
) -> Result<Module> {
    match kind {
        ModuleKind::NeuralNet => {
            let input_dim = preprocessor.output_dim(env)?;
            Module::neural_net(store, prefix, input_dim, output_dim, config, shared_torso, rng)
        }
        ModuleKind::Uniform => Ok(Module::Uniform { output_dim }),
        ModuleKind::Zero => Ok(Module::Zero { output_dim }),
        ModuleKind::Tabular => {
            let n = env.n_states().ok_or(Error::NotEnumerable)?;
            Module::tabular(store, prefix, n, output_dim)
        }
    }
}

fn run_module<S: Scalar>(
    module: &Module,
    preprocessor: Preprocessor,
    g: &mut Graph<'_, S>,
    env: &dyn Env,
    states: &StateBatch,
) -> Result<Var> {
    if module.uses_indices() {
        let idx = env.get_states_indices(states)?;
        module.forward(g, ModuleInput::Indices(&idx))
    } else {
        let x = preprocessor.preprocess::<S>(env, states)?;
        module.forward(g, ModuleInput::Features(&x))
    }
}

fn check_width(module: &Module, expected: usize, what: &str) -> Result<()> {
    if module.output_dim() != expected {
        return Err(Error::Shape(format!(
            "{what} module has {} outputs, expected {expected}",
            module.output_dim()
        )));
    }
    Ok(())
}

/// Forward-policy logits over all actions, exit included.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitPfEstimator {
    pub module: Module,
    pub preprocessor: Preprocessor,
}

impl LogitPfEstimator {
    pub fn new(env: &dyn Env, module: Module, preprocessor: Preprocessor) -> Result<Self> {
        check_width(&module, env.n_actions(), "PF")?;
        Ok(Self { module, preprocessor })
    }

    pub fn logits<S: Scalar>(&self, g: &mut Graph<'_, S>, env: &dyn Env, states: &StateBatch) -> Result<Var> {
        states.ensure_no_sink()?;
        run_module(&self.module, self.preprocessor, g, env, states)
    }

    /// `batch × n_actions` log-probabilities under the forward masks.
    pub fn log_probs<S: Scalar>(&self, g: &mut Graph<'_, S>, env: &dyn Env, states: &StateBatch) -> Result<Var> {
        let logits = self.logits(g, env, states)?;
        g.masked_log_softmax(logits, &states.forward_masks)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.module.param_ids()
    }
}

/// Backward-policy logits over the `n_actions - 1` parent actions.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitPbEstimator {
    pub module: Module,
    pub preprocessor: Preprocessor,
}

impl LogitPbEstimator {
    pub fn new(env: &dyn Env, module: Module, preprocessor: Preprocessor) -> Result<Self> {
        check_width(&module, env.n_actions() - 1, "PB")?;
        Ok(Self { module, preprocessor })
    }

    pub fn log_probs<S: Scalar>(&self, g: &mut Graph<'_, S>, env: &dyn Env, states: &StateBatch) -> Result<Var> {
        states.ensure_no_sink()?;
        if let Some(index) = states.is_initial.iter().position(|&i| i) {
            return Err(Error::BackwardFromInitial { index });
        }
        let logits = run_module(&self.module, self.preprocessor, g, env, states)?;
        g.masked_log_softmax(logits, &states.backward_masks)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.module.param_ids()
    }
}

/// `log F(s)`, optionally parametrized as a correction on top of `log R(s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogStateFlowEstimator {
    pub module: Module,
    pub preprocessor: Preprocessor,
    pub forward_looking: bool,
}

impl LogStateFlowEstimator {
    pub fn new(env: &dyn Env, module: Module, preprocessor: Preprocessor, forward_looking: bool) -> Result<Self> {
        check_width(&module, 1, "state-flow")?;
        if forward_looking && !env.all_states_terminating() {
            return Err(Error::Incompatible(format!(
                "forward-looking state flows need every state to be terminating, {} has non-terminating states",
                env.name()
            )));
        }
        Ok(Self { module, preprocessor, forward_looking })
    }

    /// `batch × 1`.
    pub fn log_flows<S: Scalar>(&self, g: &mut Graph<'_, S>, env: &dyn Env, states: &StateBatch) -> Result<Var> {
        states.ensure_no_sink()?;
        let out = run_module(&self.module, self.preprocessor, g, env, states)?;
        if !self.forward_looking {
            return Ok(out);
        }
        let log_r: Vec<S> = env.log_reward(states)?.into_iter().map(S::of).collect();
        let log_r = g.column_constant(&log_r);
        g.add(out, log_r)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.module.param_ids()
    }
}

/// `log F(s → child_a(s))` for every action, exit included. Entries at
/// disallowed actions are meaningless; consumers apply the masks.
#[derive(Clone, Debug, PartialEq)]
pub struct LogEdgeFlowEstimator {
    pub module: Module,
    pub preprocessor: Preprocessor,
}

impl LogEdgeFlowEstimator {
    pub fn new(env: &dyn Env, module: Module, preprocessor: Preprocessor) -> Result<Self> {
        check_width(&module, env.n_actions(), "edge-flow")?;
        Ok(Self { module, preprocessor })
    }

    pub fn log_edge_flows<S: Scalar>(&self, g: &mut Graph<'_, S>, env: &dyn Env, states: &StateBatch) -> Result<Var> {
        states.ensure_no_sink()?;
        run_module(&self.module, self.preprocessor, g, env, states)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.module.param_ids()
    }
}

/// Learnable scalar `log Z`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogZEstimator {
    pub param: ParamId,
}

impl LogZEstimator {
    pub const NAME: &'static str = "logZ";

    pub fn new<S: Scalar>(store: &mut ParameterStore<S>, init: S) -> Result<Self> {
        let param = store.register(Self::NAME, Array2::from_elem((1, 1), init))?;
        Ok(Self { param })
    }

    pub fn var<S: Scalar>(&self, g: &mut Graph<'_, S>) -> Var {
        g.param(self.param)
    }

    pub fn value<S: Scalar>(&self, store: &ParameterStore<S>) -> S {
        store.value(self.param)[[0, 0]]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.param]
    }
}

/// A forward policy, given either directly by logits or derived from edge
/// flows (`P_F(s'|s) ∝ F(s → s')` over allowed actions).
#[derive(Clone, Debug, PartialEq)]
pub enum ForwardPolicy {
    Logits(LogitPfEstimator),
    EdgeFlows(LogEdgeFlowEstimator),
}

impl ForwardPolicy {
    pub fn logits<S: Scalar>(&self, g: &mut Graph<'_, S>, env: &dyn Env, states: &StateBatch) -> Result<Var> {
        match self {
            ForwardPolicy::Logits(e) => e.logits(g, env, states),
            ForwardPolicy::EdgeFlows(e) => e.log_edge_flows(g, env, states),
        }
    }

    pub fn log_probs<S: Scalar>(&self, g: &mut Graph<'_, S>, env: &dyn Env, states: &StateBatch) -> Result<Var> {
        let logits = self.logits(g, env, states)?;
        g.masked_log_softmax(logits, &states.forward_masks)
    }

    /// Log-probabilities without recording a backward pass.
    pub fn eval_log_probs<S: Scalar>(
        &self,
        store: &ParameterStore<S>,
        env: &dyn Env,
        states: &StateBatch,
    ) -> Result<Array2<S>> {
        let mut g = Graph::new(store);
        let v = self.log_probs(&mut g, env, states)?;
        Ok(g.value(v).clone())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            ForwardPolicy::Logits(e) => e.param_ids(),
            ForwardPolicy::EdgeFlows(e) => e.param_ids(),
        }
    }
}

impl LogitPbEstimator {
    pub fn eval_log_probs<S: Scalar>(
        &self,
        store: &ParameterStore<S>,
        env: &dyn Env,
        states: &StateBatch,
    ) -> Result<Array2<S>> {
        let mut g = Graph::new(store);
        let v = self.log_probs(&mut g, env, states)?;
        Ok(g.value(v).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{DiscreteEbm, HyperGrid};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> HyperGrid {
        HyperGrid::new(2, 2, 0.1)
    }

    fn uniform_pf(env: &dyn Env) -> LogitPfEstimator {
        LogitPfEstimator::new(env, Module::Uniform { output_dim: env.n_actions() }, env.default_preprocessor()).unwrap()
    }

    fn uniform_pb(env: &dyn Env) -> LogitPbEstimator {
        LogitPbEstimator::new(env, Module::Uniform { output_dim: env.n_actions() - 1 }, env.default_preprocessor())
            .unwrap()
    }

    #[test]
    fn uniform_pf_is_uniform_over_mask() {
        let env = grid();
        let store = ParameterStore::<f64>::new();
        let pf = ForwardPolicy::Logits(uniform_pf(&env));
        let lp = pf.eval_log_probs(&store, &env, &env.states(array![[0, 0], [1, 1]])).unwrap();
        for c in 0..3 {
            assert!((lp[[0, c]] - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        }
        assert_eq!(lp[[1, 2]], 0.0);
        assert_eq!(lp[[1, 0]], f64::NEG_INFINITY);
    }

    #[test]
    fn tabular_pf_softmax() {
        let env = HyperGrid::new(2, 4, 0.1);
        let mut store = ParameterStore::<f64>::new();
        let module = Module::tabular(&mut store, "pf", 16, 3).unwrap();
        let table = module.param_ids()[0];
        store.value_mut(table).row_mut(0).assign(&array![2f64.ln(), 0.0, 0.0]);
        let pf = ForwardPolicy::Logits(LogitPfEstimator::new(&env, module, Preprocessor::Enum).unwrap());
        let lp = pf.eval_log_probs(&store, &env, &env.reset(1)).unwrap();
        assert!((lp[[0, 0]] - 0.5f64.ln()).abs() < 1e-15);
        assert!((lp[[0, 1]] - 0.25f64.ln()).abs() < 1e-15);
        assert!((lp[[0, 2]] - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pf_rejects_sink() {
        let env = grid();
        let store = ParameterStore::<f64>::new();
        let pf = ForwardPolicy::Logits(uniform_pf(&env));
        let sf = env.states_from_vecs(&[env.sf()]);
        assert!(matches!(pf.eval_log_probs(&store, &env, &sf), Err(Error::SinkState { index: 0 })));
    }

    #[test]
    fn uniform_pb_over_parents() {
        let env = grid();
        let store = ParameterStore::<f64>::new();
        let pb = uniform_pb(&env);
        let lp = pb.eval_log_probs(&store, &env, &env.states(array![[1, 1], [1, 0]])).unwrap();
        assert!((lp[[0, 0]] - 0.5f64.ln()).abs() < 1e-15 && (lp[[0, 1]] - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(lp[[1, 0]], 0.0);
        assert!(matches!(pb.eval_log_probs(&store, &env, &env.reset(1)), Err(Error::BackwardFromInitial { .. })));
    }

    #[test]
    fn tabular_pb_softmax() {
        let env = grid();
        let mut store = ParameterStore::<f64>::new();
        let module = Module::tabular(&mut store, "pb", 4, 2).unwrap();
        store.value_mut(module.param_ids()[0]).row_mut(3).assign(&array![3f64.ln(), 0.0]);
        let pb = LogitPbEstimator::new(&env, module, Preprocessor::Enum).unwrap();
        let lp = pb.eval_log_probs(&store, &env, &env.states(array![[1, 1]])).unwrap();
        assert!((lp[[0, 0]] - 0.75f64.ln()).abs() < 1e-15);
        assert!((lp[[0, 1]] - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn state_flow_variants() {
        let env = HyperGrid::new(2, 8, 0.1);
        let mut store = ParameterStore::<f64>::new();
        let states = env.states(array![[0, 0], [6, 6], [3, 1]]);
        let plain = LogStateFlowEstimator::new(&env, Module::Zero { output_dim: 1 }, Preprocessor::Enum, false).unwrap();
        let fl = LogStateFlowEstimator::new(&env, Module::Zero { output_dim: 1 }, Preprocessor::Enum, true).unwrap();
        let tab = Module::tabular(&mut store, "logF", 64, 1).unwrap();
        store.value_mut(tab.param_ids()[0])[[3 + 8, 0]] = 1.7;
        let tab = LogStateFlowEstimator::new(&env, tab, Preprocessor::Enum, false).unwrap();

        let mut g = Graph::new(&store);
        let a = plain.log_flows(&mut g, &env, &states).unwrap();
        let b = fl.log_flows(&mut g, &env, &states).unwrap();
        let c = tab.log_flows(&mut g, &env, &states).unwrap();
        let log_r = env.log_reward(&states).unwrap();
        assert_eq!(g.column(a), vec![0.0; 3]);
        for (i, lr) in log_r.iter().enumerate() {
            assert_eq!(g.column(b)[i] - g.column(a)[i], *lr);
        }
        assert_eq!(g.column(c)[2], 1.7);
    }

    #[test]
    fn forward_looking_needs_terminating_states() {
        let env = DiscreteEbm::new(3, 1.0);
        let err = LogStateFlowEstimator::new(&env, Module::Zero { output_dim: 1 }, Preprocessor::Identity, true);
        assert!(matches!(err, Err(Error::Incompatible(_))));
    }

    #[test]
    fn edge_flows_shape() {
        let env = grid();
        let store = ParameterStore::<f64>::new();
        let est = LogEdgeFlowEstimator::new(&env, Module::Zero { output_dim: 3 }, Preprocessor::Enum).unwrap();
        let mut g = Graph::new(&store);
        let v = est.log_edge_flows(&mut g, &env, &env.states(array![[0, 0], [1, 0]])).unwrap();
        assert_eq!(g.value(v), &Array2::<f64>::zeros((2, 3)));
    }

    #[test]
    fn shared_torso_moves_both_policies() {
        let env = HyperGrid::new(2, 4, 0.1);
        let mut store = ParameterStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = NeuralNetConfig { hidden: vec![8, 8], ..Default::default() };
        let pre = env.default_preprocessor();
        let pf = build_module(ModuleKind::NeuralNet, &mut store, "pf", &env, pre, 3, &cfg, None, &mut rng).unwrap();
        let pb =
            build_module(ModuleKind::NeuralNet, &mut store, "pb", &env, pre, 2, &cfg, pf.torso(), &mut rng).unwrap();
        let pf = ForwardPolicy::Logits(LogitPfEstimator::new(&env, pf.clone(), pre).unwrap());
        let pb = LogitPbEstimator::new(&env, pb, pre).unwrap();
        let states = env.states(array![[1, 2], [2, 1]]);
        let before = (pf.eval_log_probs(&store, &env, &states).unwrap(), pb.eval_log_probs(&store, &env, &states).unwrap());
        let torso_w = store.id("pf.torso.w0").unwrap();
        store.value_mut(torso_w).mapv_inplace(|v| v * 1.5 + 0.1);
        let after = (pf.eval_log_probs(&store, &env, &states).unwrap(), pb.eval_log_probs(&store, &env, &states).unwrap());
        assert_ne!(before.0, after.0);
        assert_ne!(before.1, after.1);
    }
}
