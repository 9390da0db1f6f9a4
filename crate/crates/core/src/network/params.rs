use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::ndcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// One learnable array with its gradient slot and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub moment1: Tensor,
    pub moment2: Tensor,
}

impl Parameter {
    fn new(value: Tensor) -> Self {
        let z = Tensor::zeros_like(&value);
        Parameter {
            grad: z.clone(),
            moment1: z.clone(),
            moment2: z,
            value,
        }
    }
}

/// Insertion-ordered named parameters plus the global optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: IndexMap<String, Parameter>,
    step: u64,
    grads_pending: bool,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid("parameters", format!("duplicate name {name:?}")));
        }
        let (idx, _) = self.entries.insert_full(name, Parameter::new(value));
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("param id").0
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), &mut *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Whether gradients were accumulated since the last update.
    pub fn has_pending_grads(&self) -> bool {
        self.grads_pending
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) -> Result<()> {
        let p = &mut self.entries[id.0];
        if p.grad.numel() != g.len() {
            return Err(Error::shape("accumulate_grad", p.grad.shape(), &[g.len()]));
        }
        for (d, s) in p.grad.data_mut().iter_mut().zip(g) {
            *d += s;
        }
        self.grads_pending = true;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
        self.grads_pending = false;
    }

    /// Overwrite every tensor (values, moments, step) from `other`, which must
    /// hold exactly the same names and shapes.
    pub fn restore_from(&mut self, other: ParameterStore) -> Result<()> {
        for name in other.entries.keys() {
            if !self.entries.contains_key(name) {
                return Err(Error::UnknownTensor(name.clone()));
            }
        }
        for (name, mine) in &self.entries {
            let theirs = other
                .entries
                .get(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if theirs.value.shape() != mine.value.shape() {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    expected: mine.value.shape().to_vec(),
                    found: theirs.value.shape().to_vec(),
                });
            }
        }
        let mut other = other;
        for (name, mine) in self.entries.iter_mut() {
            let theirs = other.entries.swap_remove(name).expect("checked above");
            mine.value = theirs.value;
            mine.moment1 = theirs.moment1;
            mine.moment2 = theirs.moment2;
            mine.grad.data_mut().fill(0.0);
        }
        self.step = other.step;
        self.grads_pending = false;
        Ok(())
    }

    pub(crate) fn insert_raw(&mut self, name: String, p: Parameter) {
        self.entries.insert(name, p);
    }

    pub(crate) fn param_by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.entries.get_mut(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn gradients_accumulate_and_reset() {
        let mut s = ParameterStore::new();
        let id = s.insert("a", Tensor::zeros(&[2])).unwrap();
        s.accumulate_grad(id, &[1.0, 2.0]).unwrap();
        s.accumulate_grad(id, &[1.0, 2.0]).unwrap();
        assert_eq!(s.grad(id).data(), &[2.0, 4.0]);
        assert!(s.has_pending_grads());
        s.zero_grad();
        assert_eq!(s.grad(id).data(), &[0.0, 0.0]);
        assert!(!s.has_pending_grads());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let mut a = ParameterStore::new();
        a.insert("w", Tensor::zeros(&[2, 3])).unwrap();
        let mut b = ParameterStore::new();
        b.insert("w", Tensor::zeros(&[3, 2])).unwrap();
        match a.clone().restore_from(b) {
            Err(Error::TensorShape { name, .. }) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        let mut c = ParameterStore::new();
        c.insert("w", Tensor::zeros(&[2, 3])).unwrap();
        c.insert("extra", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(a.clone().restore_from(c), Err(Error::UnknownTensor(n)) if n == "extra"));
        assert!(matches!(a.restore_from(ParameterStore::new()), Err(Error::MissingTensor(_))));
    }
}
