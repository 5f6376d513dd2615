use rand::Rng;
use rand_distr::{Distribution as _, StandardNormal};

use crate::tensor::{Gradients, Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors of one model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Zeros,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub(crate) fn add_init<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let mut t = Tensor::zeros(shape);
        match init {
            Init::Zeros => {}
            Init::Uniform(b) => t
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-b..=b)),
            Init::Normal(s) => t.data_mut().iter_mut().for_each(|v| {
                let z: f64 = StandardNormal.sample(rng);
                *v = s * z
            }),
        }
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.iter_mut().collect()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Records every parameter on `tape`. Frozen binding records constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Writes the gradients of a bound copy into each tensor's `grad`.
    pub fn store_grads(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            match grads.get(v) {
                Some(g) => t.set_grad(g.to_vec())?,
                None => t.zero_grad(),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces all values with those of `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(TensorError::Contract("parameter layouts differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "copy_values_from",
                    lhs: dst.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Replaces the tensor stored under `name`; shape must match.
    pub fn set(&mut self, name: &str, values: Tensor) -> Result<()> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| TensorError::Contract(format!("no parameter named {name}")))?;
        if self.tensors[idx].shape() != values.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set",
                lhs: self.tensors[idx].shape().to_vec(),
                rhs: values.shape().to_vec(),
            });
        }
        self.tensors[idx] = values.with_requires_grad(true);
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }
}
