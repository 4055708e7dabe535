use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::{Real, Tensor};

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Named trainable tensors of one model. Names are unique and shapes are
/// fixed once added.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::State(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Places every parameter on `tape` as a gradient-carrying leaf, in
    /// [`ParamId`] order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.params.iter().map(|p| tape.param(p.value.clone())).collect())
    }

    /// Places every parameter on `tape` as a constant leaf.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.params.iter().map(|p| tape.constant(p.value.clone())).collect())
    }

    /// Adds the gradients of the bound leaves into each parameter's `grad`.
    /// Parameters the loss does not reach receive a zero gradient.
    pub fn accumulate(&mut self, grads: &Gradients<T>, bound: &Bound) {
        assert_eq!(bound.0.len(), self.params.len(), "binding from another model");
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            let acc = p
                .grad
                .get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            if let Some(g) = grads.get(v) {
                acc.add_assign(g);
            }
        }
    }

    /// Adds another set's gradients (same layout) into this one.
    pub fn accumulate_from(&mut self, other: &ParamSet<T>) {
        for (p, o) in self.params.iter_mut().zip(&other.params) {
            if let Some(g) = &o.grad {
                match &mut p.grad {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn scale_grads(&mut self, s: T) {
        for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            *g = g.scale(s);
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Tape handles of a bound [`ParamSet`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Kaiming-normal kernel for a `[cout, cin, kh, kw]` convolution
/// (`std = sqrt(2 / fan_in)`).
pub fn kaiming_kernel<T: Real>(shape: [usize; 4], rng: &mut impl Rng) -> Tensor<T> {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
    Tensor::from_fn(shape.to_vec(), |_| T::lit(normal.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut set = ParamSet::<f32>::new();
        set.add("a.weight", Tensor::zeros([2])).unwrap();
        assert!(set.add("a.weight", Tensor::zeros([2])).is_err());
        assert!(set.set_value("a.weight", Tensor::zeros([3])).is_err());
        assert!(set.set_value("missing", Tensor::zeros([2])).is_err());
    }

    #[test]
    fn kaiming_is_seeded_and_scaled() {
        let a: Tensor<f64> = kaiming_kernel([16, 8, 3, 3], &mut ChaCha8Rng::seed_from_u64(1));
        let b: Tensor<f64> = kaiming_kernel([16, 8, 3, 3], &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        let var = a.data().iter().map(|x| x * x).sum::<f64>() / a.numel() as f64;
        assert!((var - 2.0 / 72.0).abs() < 0.005, "{var}");
    }

    #[test]
    fn accumulate_adds_across_calls() {
        let mut set = ParamSet::<f64>::new();
        set.add("w", Tensor::full([2], 3.0)).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let bound = set.bind(&mut tape);
            let s = tape.sum(bound.var(ParamId(0))).unwrap();
            let g = tape.backward(s).unwrap();
            set.accumulate(&g, &bound);
        }
        assert_eq!(set.get(ParamId(0)).grad.as_ref().unwrap().data(), &[2.0, 2.0]);
        set.zero_grads();
        assert!(set.get(ParamId(0)).grad.is_none());
    }
}
