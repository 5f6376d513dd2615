use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

/// Bias-corrected Adam.
///
/// Moment buffers are created on the first update and must stay congruent
/// with the parameter list afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    /// Rebuilds a state from persisted buffers.
    pub fn restore(
        learning_rate: f64,
        step: u64,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if first.len() != second.len()
            || first.iter().zip(&second).any(|(a, b)| a.len() != b.len())
        {
            return Err(TensorError::Contract("adam moment buffers are not congruent".into()));
        }
        Ok(Self {
            step,
            first,
            second,
            ..Self::new(learning_rate)
        })
    }

    /// Applies one update to `params` using the supplied gradients.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::Contract(format!(
                "adam: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
        if self.first.is_empty() && !params.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
        {
            return Err(TensorError::Contract(
                "adam: parameter list changed since the moment buffers were created".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let g = grads[i];
            let data = p.data_mut();
            for j in 0..data.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NumericFault { op: "adam_step" });
            }
        }
        Ok(())
    }

    /// Applies one update using each parameter's stored gradient.
    ///
    /// A parameter without a gradient is treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|p| p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        self.update(params, &refs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut w = Tensor::vector(&[1.0, -2.0, 3.5]);
        let mut adam = AdamState::new(0.1);
        for _ in 0..10 {
            adam.update(&mut [&mut w], &[&[0.0, 0.0, 0.0]]).unwrap();
        }
        assert_eq!(w.data(), &[1.0, -2.0, 3.5]);
        assert_eq!(adam.step_count(), 10);
    }

    #[test]
    fn first_step_moves_against_gradient_by_lr() {
        let mut w = Tensor::scalar(0.0);
        let mut adam = AdamState::new(0.01);
        adam.update(&mut [&mut w], &[&[2.5]]).unwrap();
        let delta = w.data()[0];
        assert!(delta < 0.0);
        assert!((delta + 0.01).abs() < 1e-8);
    }

    #[test]
    fn quadratic_descent() {
        // f(w) = (w - 3)^2 from w = 0, lr 0.1, 100 steps.
        let mut w = Tensor::scalar(0.0);
        let mut adam = AdamState::new(0.1);
        for _ in 0..100 {
            let g = 2.0 * (w.data()[0] - 3.0);
            adam.update(&mut [&mut w], &[&[g]]).unwrap();
        }
        // Textbook scalar Adam written out independently.
        let (mut x, mut m, mut v) = (0.0_f64, 0.0_f64, 0.0_f64);
        for k in 1..=100 {
            let g = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9_f64.powi(k));
            let vh = v / (1.0 - 0.999_f64.powi(k));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((w.data()[0] - 3.0).abs() < 0.5);
        assert_eq!(w.data()[0], x);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut w = Tensor::vector(&[1.0, 2.0]);
        let mut adam = AdamState::new(0.1);
        assert!(adam.update(&mut [&mut w], &[&[1.0]]).is_err());
        let mut u = Tensor::vector(&[1.0, 2.0, 3.0]);
        adam.update(&mut [&mut w], &[&[1.0, 1.0]]).unwrap();
        assert!(adam.update(&mut [&mut u], &[&[1.0, 1.0, 1.0]]).is_err());
    }
}
