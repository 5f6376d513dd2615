use rand::Rng;

use super::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Result, Tape, TensorError, Var};

/// Affine map `x·W + b` on `[batch × in]` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        zero: bool,
        rng: &mut R,
    ) -> Self {
        let init = if zero {
            Init::Zeros
        } else {
            Init::Uniform(1.0 / (in_features.max(1) as f64).sqrt())
        };
        let weight = store.add_init(format!("{name}.weight"), &[in_features, out_features], init, rng);
        let bias = bias.then(|| store.add_init(format!("{name}.bias"), &[out_features], Init::Zeros, rng));
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn parameter_count(in_features: usize, out_features: usize, bias: bool) -> usize {
        in_features * out_features + if bias { out_features } else { 0 }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_features {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: shape.to_vec(),
                rhs: vec![self.in_features, self.out_features],
            });
        }
        let y = tape.matmul(x, bound.get(self.weight))?;
        match self.bias {
            Some(b) => tape.add(y, bound.get(b)),
            None => Ok(y),
        }
    }
}
