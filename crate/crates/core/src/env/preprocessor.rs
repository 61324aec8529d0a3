use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Env;
use crate::containers::StateBatch;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Maps integer states to real feature rows consumed by modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preprocessor {
    /// Components cast to reals.
    Identity,
    /// One-hot of `component - offset` over `n_values` per component,
    /// concatenated.
    KHot { n_values: usize, offset: i64 },
    /// One-hot of the state index.
    Enum,
}

impl Preprocessor {
    pub fn output_dim(&self, env: &dyn Env) -> Result<usize> {
        match *self {
            Preprocessor::Identity => Ok(env.state_dim()),
            Preprocessor::KHot { n_values, .. } => Ok(env.state_dim() * n_values),
            Preprocessor::Enum => env.n_states().ok_or(Error::NotEnumerable),
        }
    }

    pub fn preprocess<S: Scalar>(&self, env: &dyn Env, states: &StateBatch) -> Result<Array2<S>> {
        let dim = self.output_dim(env)?;
        let mut out = Array2::zeros((states.len(), dim));
        match *self {
            Preprocessor::Identity => {
                for (o, &v) in out.iter_mut().zip(states.states.iter()) {
                    *o = S::from_i64(v).ok_or_else(|| Error::Shape(format!("{v} not representable")))?;
                }
            }
            Preprocessor::KHot { n_values, offset } => {
                states.ensure_no_sink()?;
                for (b, row) in states.states.rows().into_iter().enumerate() {
                    for (d, &c) in row.iter().enumerate() {
                        let k = c - offset;
                        if k < 0 || k as usize >= n_values {
                            return Err(Error::InvalidState {
                                index: b,
                                reason: format!("component {c} outside the one-hot range"),
                            });
                        }
                        out[[b, d * n_values + k as usize]] = S::one();
                    }
                }
            }
            Preprocessor::Enum => {
                states.ensure_no_sink()?;
                for (b, idx) in env.get_states_indices(states)?.into_iter().enumerate() {
                    out[[b, idx]] = S::one();
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{DiscreteEbm, HyperGrid};
    use ndarray::array;

    #[test]
    fn identity_casts() {
        let env = HyperGrid::new(2, 4, 0.1);
        let out: Array2<f64> = Preprocessor::Identity.preprocess(&env, &env.states(array![[1, 0]])).unwrap();
        assert_eq!(out, array![[1.0, 0.0]]);
    }

    #[test]
    fn khot_concatenates_one_hots() {
        let env = HyperGrid::new(2, 4, 0.1);
        let p = env.default_preprocessor();
        let out: Array2<f64> = p.preprocess(&env, &env.states(array![[1, 0]])).unwrap();
        assert_eq!(out, array![[0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]]);
        let sf = env.states_from_vecs(&[env.sf()]);
        assert!(p.preprocess::<f64>(&env, &sf).is_err());
    }

    #[test]
    fn khot_handles_unset_coordinates() {
        let env = DiscreteEbm::new(2, 1.0);
        let p = Preprocessor::KHot { n_values: 3, offset: -1 };
        let out: Array2<f32> = p.preprocess(&env, &env.states(array![[-1, 1]])).unwrap();
        assert_eq!(out, array![[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]]);
    }

    #[test]
    fn enum_one_hot_of_index() {
        let env = HyperGrid::new(2, 2, 0.1);
        let out: Array2<f64> = Preprocessor::Enum.preprocess(&env, &env.states(array![[1, 1]])).unwrap();
        assert_eq!(out, array![[0.0, 0.0, 0.0, 1.0]]);
        assert_eq!(out.shape(), &[1, 4]);
    }
}
