//! Differentiable function approximation: tape, parameters, modules and
//! optimizers.

mod graph;
mod module;
mod optim;
mod params;

pub use graph::{Activation, Gradients, Graph, SparseRows, Var};
pub use module::{Linear, Module, ModuleInput, ModuleKind, NeuralNet, NeuralNetConfig, Tabular, Torso};
pub use optim::{Algorithm, GroupSpec, NameFilter, Optimizer};
pub use params::{Checkpoint, ParamId, ParameterStore, TensorRecord};
