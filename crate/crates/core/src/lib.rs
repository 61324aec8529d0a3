//! Generative flow networks on discrete pointed DAGs.

pub mod config;
pub mod containers;
pub mod env;
pub mod error;
pub mod losses;
pub mod nn;
pub mod estimators;
pub mod exact;
pub mod samplers;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// 64-bit instantiations.
pub type ParameterStore64 = nn::ParameterStore<f64>;
pub type Graph64<'s> = nn::Graph<'s, f64>;
pub type Optimizer64 = nn::Optimizer<f64>;
pub type ExactTables64 = exact::ExactTables<f64>;
pub type Trainer64 = train::Trainer<f64>;

/// 32-bit instantiations.
pub type ParameterStore32 = nn::ParameterStore<f32>;
pub type Graph32<'s> = nn::Graph<'s, f32>;
pub type Optimizer32 = nn::Optimizer<f32>;
pub type ExactTables32 = exact::ExactTables<f32>;
pub type Trainer32 = train::Trainer<f32>;
