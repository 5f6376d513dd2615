//! Vector fields that the solvers can integrate.

use crate::tensor::{Result, Tensor, TensorError};

/// Batched velocity field: `x` is `[batch × dim]`, one time per row and an
/// optional `[batch × condition_dim]` condition. Rows never interact.
pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval(&self, x: &Tensor, t: &[f64], c: Option<&Tensor>) -> Result<Tensor>;
}

fn check_rows(x: &Tensor, t: &[f64], dim: usize) -> Result<()> {
    if x.shape().len() != 2 || x.shape()[1] != dim || x.rows() != t.len() {
        return Err(TensorError::ShapeMismatch {
            op: "vector field",
            lhs: x.shape().to_vec(),
            rhs: vec![t.len(), dim],
        });
    }
    Ok(())
}

/// `v(x, t) = value` everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantField {
    pub value: Vec<f64>,
}

impl VectorField for ConstantField {
    fn dim(&self) -> usize {
        self.value.len()
    }

    fn eval(&self, x: &Tensor, t: &[f64], _c: Option<&Tensor>) -> Result<Tensor> {
        check_rows(x, t, self.dim())?;
        let data = self.value.iter().copied().cycle().take(x.numel()).collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

/// `v(x, t) = rate · x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearField {
    pub dim: usize,
    pub rate: f64,
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &Tensor, t: &[f64], _c: Option<&Tensor>) -> Result<Tensor> {
        check_rows(x, t, self.dim)?;
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| self.rate * v).collect())
    }
}

/// Wraps a closure `(x_row, t) -> v_row`; handy in tests.
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&[f64], f64) -> Vec<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &Tensor, t: &[f64], _c: Option<&Tensor>) -> Result<Tensor> {
        check_rows(x, t, self.dim)?;
        let mut data = Vec::with_capacity(x.numel());
        for (i, &ti) in t.iter().enumerate() {
            data.extend((self.f)(x.row(i), ti));
        }
        Tensor::new(x.shape().to_vec(), data)
    }
}
