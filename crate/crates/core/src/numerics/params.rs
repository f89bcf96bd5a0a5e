//! Named, ordered parameter collections and the SGD update.

use std::collections::HashMap;

use super::{Gradients, NumericsError, Tape, Tensor, Var};

/// Index of a parameter inside its [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Frozen parameters are bound as constants and skipped by `sgd_step`.
    pub trainable: bool,
}

/// Trainable tensors in insertion order. Order is significant: it fixes the
/// checkpoint layout and the FedAvg summation order within a block.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, NumericsError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumericsError::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: "parameter insert" });
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad, trainable: true });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    /// Total number of scalars across trainable parameters.
    pub fn num_trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn set_trainable_all(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    /// Records every parameter on `tape`: trainable ones as leaves, frozen
    /// ones as constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<Bound<'t>, NumericsError> {
        let vars = self
            .params
            .iter()
            .map(|p| if p.trainable { tape.leaf(p.value.clone()) } else { tape.constant(p.value.clone()) })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Bound { vars })
    }

    /// Adds the gradients computed for `bound` into each parameter's `grad`.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound<'_>) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if !p.trainable {
                continue;
            }
            let g = grads.get(v);
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// `p ← p − lr·grad` for every trainable parameter, then zeroes all grads.
    pub fn sgd_step(&mut self, lr: f64) -> Result<(), NumericsError> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(NumericsError::InvalidArgument(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        for p in &mut self.params {
            if p.trainable {
                for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                    *v -= lr * g;
                }
                if !p.value.is_finite() {
                    return Err(NumericsError::NonFinite { op: "sgd_step" });
                }
            }
        }
        self.zero_grad();
        Ok(())
    }

    /// Same names, same shapes, same order.
    pub fn same_layout(&self, other: &ParameterStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }
}

/// Per-parameter vars for one forward pass.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}
