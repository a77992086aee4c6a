//! Named trainable parameters with gradient slots.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Learning-rate group. Sequence-mixer weights are `Att`, everything else `Main`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Main,
    Att,
}

/// What a parameter is for, as far as freezing rules care.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Other,
    Decay,
    TokenShift,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    pub group: ParamGroup,
    pub role: ParamRole,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, name-indexed collection of parameters.
///
/// Every store carries a process-unique id so a graph can tell which store
/// a parameter leaf came from; cloning a store allocates a fresh id.
#[derive(Debug)]
pub struct ParamStore<T> {
    id: u64,
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            index: self.index.clone(),
        }
    }
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn store_id(&self) -> u64 {
        self.id
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        group: ParamGroup,
        role: ParamRole,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.clone(), value, grad, trainable: true, group, role });
        self.index.insert(name, id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
        let got = self.get(id).value.shape();
        if got != shape {
            return Err(Error::invalid(format!(
                "parameter {name} has shape {got:?}, expected {shape:?}"
            )));
        }
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
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

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Marks exactly the parameters matching `pred` as trainable.
    pub fn set_trainable(&mut self, pred: impl Fn(&Parameter<T>) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(p);
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable(|_| false);
    }

    /// Overwrites the value of `name` (shape must match).
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.expect(name, value.shape())?;
        self.params[id.0].value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }
}
