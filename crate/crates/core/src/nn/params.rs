use std::io::{Read, Write};

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of a parameter inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry<S> {
    value: Array2<S>,
    grad: Array2<S>,
}

/// Named learnable tensors and their accumulated gradients.
///
/// Names are hierarchical (`"pf.torso.w0"`, `"logZ"`) and unique. A torso
/// shared between two estimators is registered once and referenced by both.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<S> {
    entries: IndexMap<String, Entry<S>>,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn register(&mut self, name: &str, value: Array2<S>) -> Result<ParamId> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        let grad = Array2::zeros(value.dim());
        let (idx, _) = self.entries.insert_full(name.to_string(), Entry { value, grad });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("valid ParamId").0
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Array2<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<S> {
        &mut self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Array2<S>) -> Result<()> {
        let (name, entry) = self.entries.get_index_mut(id.0).expect("valid ParamId");
        if entry.value.dim() != value.dim() {
            return Err(Error::Shape(format!("parameter {name:?}: {:?} vs {:?}", entry.value.dim(), value.dim())));
        }
        entry.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Array2<S> {
        &self.entries[id.0].grad
    }

    /// Adds `grads` onto the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients<S>) {
        for (id, g) in grads.iter() {
            self.entries[id.0].grad += g;
        }
    }

    pub fn zero_grad(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.fill(S::zero());
        }
    }

    pub fn named_parameters(&self) -> impl Iterator<Item = (&str, &Array2<S>)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), &e.value))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tensors: self
                .entries
                .iter()
                .map(|(name, e)| {
                    let (r, c) = e.value.dim();
                    let values = e.value.iter().map(|v| v.as_f64()).collect();
                    (name.clone(), TensorRecord { shape: [r, c], values })
                })
                .collect(),
        }
    }

    /// Overwrites every stored value from `ckpt`. Names and shapes must match
    /// exactly.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for name in ckpt.tensors.keys() {
            if !self.entries.contains_key(name) {
                return Err(Error::UnknownParameter(name.clone()));
            }
        }
        for (name, entry) in self.entries.iter_mut() {
            let rec = ckpt.tensors.get(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            let [r, c] = rec.shape;
            if (r, c) != entry.value.dim() || rec.values.len() != r * c {
                return Err(Error::Shape(format!("checkpoint tensor {name:?} has shape {:?}", rec.shape)));
            }
            let values: Vec<S> = rec.values.iter().map(|&v| S::of(v)).collect();
            entry.value = Array2::from_shape_vec((r, c), values).expect("checked shape");
        }
        Ok(())
    }

    pub fn save_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, &self.to_checkpoint())?;
        Ok(())
    }

    pub fn load_json<R: Read>(&mut self, input: R) -> Result<()> {
        let ckpt: Checkpoint = serde_json::from_reader(input)?;
        self.load_checkpoint(&ckpt)
    }
}

/// Serialized parameters: name → shape and row-major values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Checkpoint {
    pub tensors: IndexMap<String, TensorRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParameterStore::<f64>::new();
        store.register("logZ", array![[0.0]]).unwrap();
        assert!(matches!(store.register("logZ", array![[1.0]]), Err(Error::DuplicateParameter(_))));
    }

    #[test]
    fn load_rejects_mismatch() {
        let mut a = ParameterStore::<f64>::new();
        a.register("w", array![[1.0, 2.0]]).unwrap();
        let mut b = ParameterStore::<f64>::new();
        b.register("w", array![[1.0], [2.0]]).unwrap();
        assert!(b.load_checkpoint(&a.to_checkpoint()).is_err());
        let mut c = ParameterStore::<f64>::new();
        c.register("v", array![[1.0, 2.0]]).unwrap();
        assert!(matches!(c.load_checkpoint(&a.to_checkpoint()), Err(Error::UnknownParameter(_))));
    }

    #[test]
    fn json_layout() {
        let mut a = ParameterStore::<f64>::new();
        a.register("logZ", array![[0.5]]).unwrap();
        let mut buf = Vec::new();
        a.save_json(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), r#"{"logZ":{"shape":[1,1],"values":[0.5]}}"#);
    }

    proptest! {
        #[test]
        fn json_reload_is_bit_exact(values in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 6)) {
            let mut a = ParameterStore::<f64>::new();
            let id = a.register("pf.torso.w0", Array2::from_shape_vec((2, 3), values.clone()).unwrap()).unwrap();
            let mut buf = Vec::new();
            a.save_json(&mut buf).unwrap();
            let mut b = ParameterStore::<f64>::new();
            b.register("pf.torso.w0", Array2::zeros((2, 3))).unwrap();
            b.load_json(buf.as_slice()).unwrap();
            for (x, y) in a.value(id).iter().zip(b.value(id).iter()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        #[test]
        fn f32_reload_is_bit_exact(values in proptest::collection::vec(proptest::num::f32::NORMAL, 4)) {
            let mut a = ParameterStore::<f32>::new();
            let id = a.register("w", Array2::from_shape_vec((2, 2), values).unwrap()).unwrap();
            let mut buf = Vec::new();
            a.save_json(&mut buf).unwrap();
            let mut b = ParameterStore::<f32>::new();
            b.register("w", Array2::zeros((2, 2))).unwrap();
            b.load_json(buf.as_slice()).unwrap();
            for (x, y) in a.value(id).iter().zip(b.value(id).iter()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
