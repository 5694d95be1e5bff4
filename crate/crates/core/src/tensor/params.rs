use std::collections::HashMap;

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with a unique name and an owning component.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub component: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Ordered collection of a model's parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
    components: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register_component(&mut self, id: &str) {
        if !self.components.iter().any(|c| c == id) {
            self.components.push(id.to_string());
        }
    }

    pub fn components(&self) -> &[String] {
        &self.components
    }

    pub fn add(&mut self, name: &str, component: &str, value: Tensor) -> Result<ParamId> {
        if component.is_empty() || !self.components.iter().any(|c| c == component) {
            return Err(TensorError::UnknownComponent(component.to_string()));
        }
        if self.by_name.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            component: component.to_string(),
            value,
            grad: None,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Parameters owned by `component`, in registration order.
    pub fn component_ids(&self, component: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.component == component)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        match p.grad.as_mut() {
            Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                p.grad = Some(
                    Tensor::new(p.value.shape().to_vec(), g.to_vec())
                        .expect("gradient matches parameter shape"),
                )
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}
