use std::collections::HashMap;

use super::tensor::{Element, Tensor};
use super::{shape_error, AutodiffError, Result};

/// Handle to a named parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named trainable parameters with gradient slots.
///
/// Registration order is stable and defines the checkpoint manifest order.
pub struct ParamStore<E> {
    names: Vec<String>,
    values: Vec<Tensor<E>>,
    grads: Vec<Tensor<E>>,
    index: HashMap<String, usize>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<E>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()));
        }
        let id = self.values.len();
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Bind to an existing parameter by name, or register a fresh one.
    ///
    /// Model components use this so the same construction code serves both
    /// random initialization and checkpoint loading; the shape is always
    /// verified against `shape`.
    pub fn ensure(
        &mut self,
        name: &str,
        shape: &[usize],
        init: impl FnOnce() -> Tensor<E>,
    ) -> Result<ParamId> {
        if let Some(&i) = self.index.get(name) {
            if self.values[i].shape() != shape {
                return Err(shape_error(
                    "ensure",
                    format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        name,
                        self.values[i].shape(),
                        shape
                    ),
                ));
            }
            return Ok(ParamId(i));
        }
        let value = init();
        if value.shape() != shape {
            return Err(shape_error(
                "ensure",
                format!(
                    "initializer for {} produced shape {:?}, expected {:?}",
                    name,
                    value.shape(),
                    shape
                ),
            ));
        }
        self.register(name, value)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<E> {
        &self.values[id.0]
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<E>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(shape_error(
                "set_value",
                format!(
                    "parameter {} has shape {:?}, got {:?}",
                    self.names[id.0],
                    self.values[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<E> {
        &self.grads[id.0]
    }

    pub fn add_grad(&mut self, id: ParamId, g: &Tensor<E>) -> Result<()> {
        let cur = &self.grads[id.0];
        if cur.shape() != g.shape() {
            return Err(shape_error(
                "add_grad",
                format!(
                    "gradient shape {:?} for parameter of shape {:?}",
                    g.shape(),
                    cur.shape()
                ),
            ));
        }
        let mut data = cur.data().to_vec();
        for (d, &x) in data.iter_mut().zip(g.data()) {
            *d += x;
        }
        self.grads[id.0] = Tensor::from_vec(g.shape().to_vec(), data)?;
        Ok(())
    }

    pub fn set_grad(&mut self, id: ParamId, g: Tensor<E>) -> Result<()> {
        if g.shape() != self.values[id.0].shape() {
            return Err(shape_error(
                "set_grad",
                format!(
                    "gradient shape {:?} for parameter of shape {:?}",
                    g.shape(),
                    self.values[id.0].shape()
                ),
            ));
        }
        self.grads[id.0] = g;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for i in 0..self.grads.len() {
            self.grads[i] = Tensor::zeros(self.values[i].shape());
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.values.iter())
    }

    pub fn total_parameters(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Cheap snapshot of all parameter values (storage is shared).
    pub fn snapshot(&self) -> Vec<Tensor<E>> {
        self.values.clone()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<E>]) {
        assert_eq!(
            snapshot.len(),
            self.values.len(),
            "snapshot from a different model"
        );
        self.values = snapshot.to_vec();
    }
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}
