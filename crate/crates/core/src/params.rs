//! Named, role-tagged trainable parameters.

use crate::error::{Error, Result};
use crate::optim::RoleTag;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub role: RoleTag,
    pub value: Tensor<F>,
    /// Learning-rate multiplier relative to the base rate.
    pub lr_mult: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        role: RoleTag,
        value: Tensor<F>,
        lr_mult: f64,
    ) -> Result<ParamId> {
        let name = name.into();
        if !(lr_mult > 0.0 && lr_mult.is_finite()) {
            return Err(Error::config(format!("{name}: lr multiplier must be positive, got {lr_mult}")));
        }
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.params.push(Param { name, role, value, lr_mult });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
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

    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "param_set",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Total element count of parameters whose role satisfies `pred`.
    pub fn count_where(&self, pred: impl Fn(RoleTag) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| pred(p.role))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<F>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad))
                .collect(),
        }
    }

    /// Gradients after backward, zero-filled for parameters the loss never reached.
    pub fn grads(&self, tape: &Tape<F>, bound: &Bound) -> Vec<Vec<F>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| {
                tape.grad_data(v)
                    .map(<[F]>::to_vec)
                    .unwrap_or_else(|| vec![F::zero(); p.value.numel()])
            })
            .collect()
    }

    pub fn values(&self) -> Vec<Tensor<F>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Same names, roles and multipliers with values converted to `G`.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    role: p.role,
                    value: p.value.cast(),
                    lr_mult: p.lr_mult,
                })
                .collect(),
        }
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
