//! SGD and Adam with named parameter groups.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Algorithm {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Algorithm {
    pub fn adam() -> Self {
        Algorithm::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Which parameter names a group owns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NameFilter {
    All,
    Contains(String),
    NotContains(String),
}

impl NameFilter {
    pub fn matches(&self, name: &str) -> bool {
        match self {
            NameFilter::All => true,
            NameFilter::Contains(s) => name.contains(s.as_str()),
            NameFilter::NotContains(s) => !name.contains(s.as_str()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSpec {
    pub filter: NameFilter,
    pub lr: f64,
    pub algorithm: Algorithm,
}

#[derive(Clone, Debug)]
struct Group<S> {
    params: Vec<ParamId>,
    lr: S,
    algorithm: Algorithm,
    moments: Vec<(Array2<S>, Array2<S>)>,
}

/// Optimizer over disjoint parameter groups. Parameters that no group claims
/// are left untouched.
#[derive(Clone, Debug)]
pub struct Optimizer<S> {
    groups: Vec<Group<S>>,
    steps: u64,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(store: &ParameterStore<S>, specs: &[GroupSpec]) -> Result<Self> {
        let mut owner: Vec<Option<usize>> = vec![None; store.len()];
        let mut groups = Vec::with_capacity(specs.len());
        for (g, spec) in specs.iter().enumerate() {
            let mut params = Vec::new();
            for id in store.ids() {
                if !spec.filter.matches(store.name(id)) {
                    continue;
                }
                if let Some(prev) = owner[id.0] {
                    return Err(Error::Config(format!(
                        "parameter {:?} matched by groups {prev} and {g}",
                        store.name(id)
                    )));
                }
                owner[id.0] = Some(g);
                params.push(id);
            }
            let moments = params
                .iter()
                .map(|&id| {
                    let dim = store.value(id).dim();
                    (Array2::zeros(dim), Array2::zeros(dim))
                })
                .collect();
            groups.push(Group { params, lr: S::of(spec.lr), algorithm: spec.algorithm, moments });
        }
        Ok(Self { groups, steps: 0 })
    }

    pub fn group_params(&self, group: usize) -> &[ParamId] {
        &self.groups[group].params
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the stored gradients. Gradients are left in
    /// place; call [`ParameterStore::zero_grad`] before the next backward.
    pub fn step(&mut self, store: &mut ParameterStore<S>) {
        self.steps += 1;
        let t = self.steps as i32;
        for group in &mut self.groups {
            let lr = group.lr;
            for (k, &id) in group.params.iter().enumerate() {
                let grad = store.grad(id).clone();
                match group.algorithm {
                    Algorithm::Sgd => {
                        Zip::from(store.value_mut(id)).and(&grad).for_each(|p, &g| *p = *p - lr * g);
                    }
                    Algorithm::Adam { beta1, beta2, eps } => {
                        let (b1, b2, eps) = (S::of(beta1), S::of(beta2), S::of(eps));
                        let one = S::one();
                        let bc1 = one - b1.powi(t);
                        let bc2 = one - b2.powi(t);
                        let (m, v) = &mut group.moments[k];
                        Zip::from(store.value_mut(id)).and(m).and(v).and(&grad).for_each(|p, m, v, &g| {
                            *m = b1 * *m + (one - b1) * g;
                            *v = b2 * *v + (one - b2) * g * g;
                            let m_hat = *m / bc1;
                            let v_hat = *v / bc2;
                            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                        });
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;
    use ndarray::array;

    fn one_param(value: f64, grad: f64) -> (ParameterStore<f64>, ParamId) {
        let mut store = ParameterStore::new();
        let id = store.register("p", array![[value]]).unwrap();
        let mut g = Graph::new(&store);
        let p = g.param(id);
        let loss = g.scale(p, grad);
        let grads = g.backward(loss).unwrap();
        store.accumulate(&grads);
        (store, id)
    }

    #[test]
    fn sgd_step() {
        let (mut store, id) = one_param(1.0, 2.0);
        let mut opt = Optimizer::new(
            &store,
            &[GroupSpec { filter: NameFilter::All, lr: 0.1, algorithm: Algorithm::Sgd }],
        )
        .unwrap();
        opt.step(&mut store);
        assert!((store.value(id)[[0, 0]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step() {
        let (mut store, id) = one_param(0.0, 1.0);
        let mut opt = Optimizer::new(
            &store,
            &[GroupSpec { filter: NameFilter::All, lr: 0.001, algorithm: Algorithm::adam() }],
        )
        .unwrap();
        opt.step(&mut store);
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((store.value(id)[[0, 0]] - expected).abs() < 1e-18);
    }

    #[test]
    fn log_z_groups_are_disjoint() {
        let mut store = ParameterStore::<f64>::new();
        let w = store.register("pf.head.w", array![[1.0]]).unwrap();
        let z = store.register("logZ", array![[1.0]]).unwrap();
        let specs = [
            GroupSpec { filter: NameFilter::NotContains("logZ".into()), lr: 0.001, algorithm: Algorithm::Sgd },
            GroupSpec { filter: NameFilter::Contains("logZ".into()), lr: 0.1, algorithm: Algorithm::Sgd },
        ];
        let mut opt = Optimizer::new(&store, &specs).unwrap();
        assert_eq!(opt.group_params(0), &[w]);
        assert_eq!(opt.group_params(1), &[z]);

        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(z);
        let s = g.add(a, b).unwrap();
        let grads = g.backward(s).unwrap();
        store.accumulate(&grads);
        opt.step(&mut store);
        assert!((store.value(w)[[0, 0]] - 0.999).abs() < 1e-15);
        assert!((store.value(z)[[0, 0]] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn overlapping_groups_rejected() {
        let mut store = ParameterStore::<f64>::new();
        store.register("logZ", array![[0.0]]).unwrap();
        let specs = [
            GroupSpec { filter: NameFilter::All, lr: 0.1, algorithm: Algorithm::Sgd },
            GroupSpec { filter: NameFilter::Contains("logZ".into()), lr: 0.1, algorithm: Algorithm::Sgd },
        ];
        assert!(matches!(Optimizer::new(&store, &specs), Err(Error::Config(_))));
    }
}
