use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Activation, Graph, Var};
use super::params::{ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModuleKind {
    NeuralNet,
    Uniform,
    Zero,
    Tabular,
}

impl FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NeuralNet" => Ok(ModuleKind::NeuralNet),
            "Uniform" => Ok(ModuleKind::Uniform),
            "Zero" => Ok(ModuleKind::Zero),
            "Tabular" => Ok(ModuleKind::Tabular),
            other => Err(Error::Config(format!(
                "unknown module {other:?}, expected NeuralNet, Uniform, Zero or Tabular"
            ))),
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralNetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NeuralNetConfig {
    fn default() -> Self {
        Self { hidden: vec![256, 256], activation: Activation::Relu }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Linear {
    /// Weights and biases uniform in `±1/sqrt(input_dim)`.
    pub fn register<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        prefix: &str,
        suffix: &str,
        input_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (input_dim.max(1) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<S> { (0..n).map(|_| S::of(rng.random_range(-bound..=bound))).collect() };
        let w = Array2::from_shape_vec((input_dim, output_dim), draw(input_dim * output_dim)).expect("shape");
        let b = Array2::from_shape_vec((1, output_dim), draw(output_dim)).expect("shape");
        Ok(Self {
            weight: store.register(&format!("{prefix}.w{suffix}"), w)?,
            bias: store.register(&format!("{prefix}.b{suffix}"), b)?,
            input_dim,
            output_dim,
        })
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.affine(x, w, b)
    }
}

/// Hidden layers of a [`NeuralNet`]; cloning a torso shares its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Torso {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub input_dim: usize,
}

impl Torso {
    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.output_dim)
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            let z = layer.forward(g, x)?;
            x = g.activate(z, self.activation);
        }
        Ok(x)
    }
}

/// MLP: activated affine torso followed by an affine head.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralNet {
    pub torso: Torso,
    pub head: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tabular {
    pub table: ParamId,
    pub n_states: usize,
    pub output_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Module {
    NeuralNet(NeuralNet),
    /// Zero logits, i.e. a uniform policy over allowed actions.
    Uniform { output_dim: usize },
    Zero { output_dim: usize },
    Tabular(Tabular),
}

/// What a module consumes: preprocessed features, or state indices for
/// tabular modules.
#[derive(Clone, Copy, Debug)]
pub enum ModuleInput<'a, S> {
    Features(&'a Array2<S>),
    Indices(&'a [usize]),
}

impl<S> ModuleInput<'_, S> {
    fn batch_len(&self) -> usize {
        match self {
            ModuleInput::Features(x) => x.nrows(),
            ModuleInput::Indices(i) => i.len(),
        }
    }
}

impl Module {
    /// Registers a new MLP under `prefix`, or a head on top of `shared` when a
    /// torso is supplied.
    pub fn neural_net<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        prefix: &str,
        input_dim: usize,
        output_dim: usize,
        config: &NeuralNetConfig,
        shared: Option<&Torso>,
        rng: &mut R,
    ) -> Result<Self> {
        let torso = match shared {
            Some(t) => {
                if t.input_dim != input_dim {
                    return Err(Error::Shape(format!(
                        "shared torso expects {} inputs, got {input_dim}",
                        t.input_dim
                    )));
                }
                t.clone()
            }
            None => {
                let mut layers = Vec::with_capacity(config.hidden.len());
                let mut width = input_dim;
                for (i, &h) in config.hidden.iter().enumerate() {
                    layers.push(Linear::register(store, &format!("{prefix}.torso"), &i.to_string(), width, h, rng)?);
                    width = h;
                }
                Torso { layers, activation: config.activation, input_dim }
            }
        };
        let head = Linear::register(store, &format!("{prefix}.head"), "", torso.output_dim(), output_dim, rng)?;
        Ok(Module::NeuralNet(NeuralNet { torso, head }))
    }

    /// Zero-initialized `n_states × output_dim` table.
    pub fn tabular<S: Scalar>(
        store: &mut ParameterStore<S>,
        prefix: &str,
        n_states: usize,
        output_dim: usize,
    ) -> Result<Self> {
        let table = store.register(&format!("{prefix}.table"), Array2::zeros((n_states, output_dim)))?;
        Ok(Module::Tabular(Tabular { table, n_states, output_dim }))
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Module::NeuralNet(n) => n.head.output_dim,
            Module::Uniform { output_dim } | Module::Zero { output_dim } => *output_dim,
            Module::Tabular(t) => t.output_dim,
        }
    }

    pub fn kind(&self) -> ModuleKind {
        match self {
            Module::NeuralNet(_) => ModuleKind::NeuralNet,
            Module::Uniform { .. } => ModuleKind::Uniform,
            Module::Zero { .. } => ModuleKind::Zero,
            Module::Tabular(_) => ModuleKind::Tabular,
        }
    }

    pub fn uses_indices(&self) -> bool {
        matches!(self, Module::Tabular(_))
    }

    pub fn torso(&self) -> Option<&Torso> {
        match self {
            Module::NeuralNet(n) => Some(&n.torso),
            _ => None,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Module::NeuralNet(n) => n
                .torso
                .layers
                .iter()
                .chain(std::iter::once(&n.head))
                .flat_map(|l| [l.weight, l.bias])
                .collect(),
            Module::Tabular(t) => vec![t.table],
            Module::Uniform { .. } | Module::Zero { .. } => Vec::new(),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, input: ModuleInput<'_, S>) -> Result<Var> {
        match (self, input) {
            (Module::NeuralNet(net), ModuleInput::Features(x)) => {
                if x.ncols() != net.torso.input_dim {
                    return Err(Error::Shape(format!(
                        "NeuralNet expects {} features, got {}",
                        net.torso.input_dim,
                        x.ncols()
                    )));
                }
                let x = g.constant(x.clone());
                let h = net.torso.forward(g, x)?;
                net.head.forward(g, h)
            }
            (Module::Tabular(t), ModuleInput::Indices(idx)) => {
                let table = g.param(t.table);
                g.select_rows(table, idx)
            }
            (Module::Uniform { output_dim } | Module::Zero { output_dim }, input) => {
                Ok(g.constant(Array2::zeros((input.batch_len(), *output_dim))))
            }
            (Module::NeuralNet(_), ModuleInput::Indices(_)) => {
                Err(Error::Shape("NeuralNet needs preprocessed features".into()))
            }
            (Module::Tabular(_), ModuleInput::Features(_)) => {
                Err(Error::Shape("Tabular module needs state indices".into()))
            }
        }
    }
}
