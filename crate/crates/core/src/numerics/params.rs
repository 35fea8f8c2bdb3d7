use std::collections::HashMap;

use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which optimizer owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Network weights: convolutions, recurrent cells, head, patch gates.
    Weights,
    /// Architecture parameters of the relaxed cell.
    Architecture,
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<F>,
    pub grad: Option<Tensor<F>>,
}

/// Owner of all trainable tensors of a model. Each tensor is stored once;
/// shared weights are expressed by handing out the same [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor. Panics on a duplicate name, which is a
    /// construction bug rather than a runtime condition.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, group: ParamGroup) -> ParamId {
        let name = name.into();
        let id = ParamId(self.params.len());
        let previous = self.by_name.insert(name.clone(), id);
        assert!(previous.is_none(), "duplicate parameter name {name}");
        self.params.push(Param {
            name,
            group,
            value,
            grad: None,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.params[id.0].group == group).collect()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params[id.0].grad.as_ref()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<F>) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => g.add_assign(grad),
            None => p.grad = Some(grad.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Total number of scalar parameters; shared tensors count once.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_elements_where(&self, mut pred: impl FnMut(&Param<F>) -> bool) -> usize {
        self.params.iter().filter(|p| pred(p)).map(|p| p.value.len()).sum()
    }

    pub fn snapshot(&self, ids: &[ParamId]) -> Vec<Tensor<F>> {
        ids.iter().map(|&id| self.params[id.0].value.clone()).collect()
    }

    pub fn restore(&mut self, ids: &[ParamId], values: &[Tensor<F>]) {
        for (&id, v) in ids.iter().zip(values) {
            self.params[id.0].value = v.clone();
        }
    }
}
