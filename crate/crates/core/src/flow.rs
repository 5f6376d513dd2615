//! Training objectives: rectified flow, (annealing) reflow, one-step
//! distillation and the two-step flow-guided regularizer.
//!
//! Every loss is the batch mean of a squared Euclidean norm and is recorded on
//! a [`Tape`] so it can be differentiated with respect to the model being
//! trained. Time runs from `t = 1` (noise) to `t = 0` (data).

use serde::{Deserialize, Serialize};

use crate::field::VectorField;
use crate::nn::{Bound, VelocityModel};
use crate::rng::{rng_at, Stream};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};
use rand::Rng;

/// Lower/upper clamp for sampled times.
pub const T_EPS: f64 = 1e-5;

/// Linear annealing of the noise-mixing weight: `β(k) = 1 − min(1, k / K)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub k_a_step: u64,
}

impl AnnealSchedule {
    pub fn new(k_a_step: u64) -> Self {
        Self { k_a_step }
    }

    /// `K = 0` means pure reflow from the first iteration.
    pub fn beta(&self, k: u64) -> f64 {
        if self.k_a_step == 0 {
            return 0.0;
        }
        1.0 - (k as f64 / self.k_a_step as f64).min(1.0)
    }
}

/// Uniform times on `[T_EPS, 1 − T_EPS]`, one per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeSampler {
    pub seed: u64,
}

impl TimeSampler {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn sample(&self, n: usize, draw: u64) -> Vec<f64> {
        let mut rng = rng_at(self.seed, Stream::Time, draw);
        (0..n)
            .map(|_| rng.random::<f64>().clamp(T_EPS, 1.0 - T_EPS))
            .collect()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `t·x1 + (1 − t)·x0`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    if x0.len() != x1.len() {
        return Err(TensorError::ShapeMismatch {
            op: "interpolate",
            lhs: vec![x0.len()],
            rhs: vec![x1.len()],
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(TensorError::Contract(format!("interpolation time {t} outside [0, 1]")));
    }
    Ok(x0.iter().zip(x1).map(|(a, b)| t * b + (1.0 - t) * a).collect())
}

/// Row-wise interpolation with one time per row.
pub fn interpolate_rows(x0: &Tensor, x1: &Tensor, t: &[f64]) -> Result<Tensor> {
    same_shape("interpolate", x0, x1)?;
    if x0.rows() != t.len() {
        return Err(TensorError::Contract(format!("{} times for {} rows", t.len(), x0.rows())));
    }
    let mut data = Vec::with_capacity(x0.numel());
    for (i, &ti) in t.iter().enumerate() {
        data.extend(interpolate(x0.row(i), x1.row(i), ti)?);
    }
    Tensor::new(x0.shape().to_vec(), data)
}

/// `√(1 − β²)·x1 + β·x1′`.
pub fn mix_noise(x1: &[f64], x1_prime: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(TensorError::Contract(format!("beta {beta} outside [0, 1]")));
    }
    if x1.len() != x1_prime.len() {
        return Err(TensorError::ShapeMismatch {
            op: "mix_noise",
            lhs: vec![x1.len()],
            rhs: vec![x1_prime.len()],
        });
    }
    let keep = (1.0 - beta * beta).sqrt();
    Ok(x1.iter().zip(x1_prime).map(|(a, b)| keep * a + beta * b).collect())
}

/// Batch mean of `‖v(x, t, c) − target‖²`.
pub fn velocity_regression(
    tape: &mut Tape,
    model: &VelocityModel,
    bound: &Bound,
    x: Tensor,
    t: &[f64],
    c: Option<Var>,
    target: Tensor,
) -> Result<Var> {
    same_shape("velocity regression", &x, &target)?;
    let rows = x.rows();
    if rows == 0 {
        return Err(TensorError::Contract("loss over an empty batch".into()));
    }
    let xv = tape.constant(x);
    let v = model.forward(tape, bound, xv, t, c)?;
    let target = tape.constant(target);
    let diff = tape.sub(v, target)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / rows as f64)
}

fn difference(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("difference", a, b)?;
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(p, q)| p - q).collect())
}

/// Rectified-flow objective on the coupling `(x0, x1)`:
/// `‖v(x_t, t, c) − (x1 − x0)‖²` with `x_t = t·x1 + (1 − t)·x0`.
///
/// With `x0` replaced by the ODE endpoints of a trained model this is the
/// reflow objective.
#[allow(clippy::too_many_arguments)]
pub fn rf_loss(
    tape: &mut Tape,
    model: &VelocityModel,
    bound: &Bound,
    x0: &Tensor,
    x1: &Tensor,
    c: Option<Var>,
    t: &[f64],
) -> Result<Var> {
    let xt = interpolate_rows(x0, x1, t)?;
    let target = difference(x1, x0)?;
    velocity_regression(tape, model, bound, xt, t, c, target)
}

/// Inputs of one annealing-reflow evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AnnealBatch<'a> {
    pub x1: &'a Tensor,
    pub x0_hat: &'a Tensor,
    pub x1_prime: &'a Tensor,
    pub t: &'a [f64],
    pub k: u64,
}

/// Coupling noise for iteration `k`: each pair's noise mixed with fresh noise.
pub fn annealed_noise(x1: &Tensor, x1_prime: &Tensor, beta: f64) -> Result<Tensor> {
    same_shape("mix_noise", x1, x1_prime)?;
    let data = mix_noise(x1.data(), x1_prime.data(), beta)?;
    Tensor::new(x1.shape().to_vec(), data)
}

/// `‖v_φ(x_t^β, t, c) − (x1^β − x̂0)‖²` with `x1^β` from [`mix_noise`] at `β(k)`.
pub fn annealing_reflow_loss(
    tape: &mut Tape,
    student: &VelocityModel,
    bound: &Bound,
    batch: AnnealBatch<'_>,
    c: Option<Var>,
    sched: AnnealSchedule,
) -> Result<Var> {
    let beta = sched.beta(batch.k);
    let x1b = annealed_noise(batch.x1, batch.x1_prime, beta)?;
    rf_loss(tape, student, bound, batch.x0_hat, &x1b, c, batch.t)
}

/// One-step distillation: `‖(x1 − x̂0) − v_φ′(x1, 1, c)‖²`.
pub fn distill_loss(
    tape: &mut Tape,
    student: &VelocityModel,
    bound: &Bound,
    x1: &Tensor,
    x0_hat: &Tensor,
    c: Option<Var>,
) -> Result<Var> {
    let target = difference(x1, x0_hat)?;
    let ones = vec![1.0; x1.rows()];
    velocity_regression(tape, student, bound, x1.clone(), &ones, c, target)
}

/// Two-step composition of a frozen field:
/// `x̃0 = x1 − (1 − t)·v(x1, 1, c) − t·v(x_t, t, c)` with `x_t = x1 − (1 − t)·v(x1, 1, c)`.
pub fn two_step_target(
    teacher: &dyn VectorField,
    x1: &Tensor,
    c: Option<&Tensor>,
    t: &[f64],
) -> Result<Tensor> {
    let rows = x1.rows();
    if t.len() != rows {
        return Err(TensorError::Contract(format!("{} times for {rows} rows", t.len())));
    }
    let d = x1.cols();
    let ones = vec![1.0; rows];
    let v1 = teacher.eval(x1, &ones, c)?;
    let mut xt = Vec::with_capacity(x1.numel());
    for i in 0..rows {
        for j in 0..d {
            xt.push(x1.row(i)[j] - (1.0 - t[i]) * v1.row(i)[j]);
        }
    }
    let xt = Tensor::new(x1.shape().to_vec(), xt)?;
    let v2 = teacher.eval(&xt, t, c)?;
    let mut out = Vec::with_capacity(x1.numel());
    for i in 0..rows {
        for j in 0..d {
            out.push(x1.row(i)[j] - (1.0 - t[i]) * v1.row(i)[j] - t[i] * v2.row(i)[j]);
        }
    }
    Tensor::new(x1.shape().to_vec(), out)
}

/// `‖x̃0 − (x1 − v_φ′(x1, 1, c))‖²`; the frozen field only supplies a constant target.
#[allow(clippy::too_many_arguments)]
pub fn two_step_loss(
    tape: &mut Tape,
    teacher2: &dyn VectorField,
    student: &VelocityModel,
    bound: &Bound,
    x1: &Tensor,
    c: Option<Var>,
    t: &[f64],
) -> Result<Var> {
    if t.iter().any(|&s| !(s > 0.0 && s < 1.0)) {
        return Err(TensorError::Contract("two-step times must lie in (0, 1)".into()));
    }
    let c_value = c.map(|c| tape.tensor(c));
    let target_x0 = two_step_target(teacher2, x1, c_value.as_ref(), t)?;
    distill_loss(tape, student, bound, x1, &target_x0, c)
}

/// Flow-guided distillation total with unit weights.
pub fn fg_distill_loss(tape: &mut Tape, distill: Var, two_step: Var) -> Result<Var> {
    tape.add(distill, two_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::VelocityConfig;

    fn zero_model(d: usize) -> VelocityModel {
        VelocityModel::new(VelocityConfig::new(d, 4, 1), 0).unwrap()
    }

    fn loss_value(f: impl FnOnce(&mut Tape, &Bound) -> Result<Var>, model: &VelocityModel) -> f64 {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, true);
        let l = f(&mut tape, &bound).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn beta_schedule() {
        let s = AnnealSchedule::new(3000);
        assert_eq!(s.beta(0), 1.0);
        assert_eq!(s.beta(3000), 0.0);
        assert_eq!(s.beta(1500), 0.5);
        assert_eq!(s.beta(9000), 0.0);
        assert_eq!(AnnealSchedule::new(0).beta(0), 0.0);
        let mut prev = 1.0;
        for k in 0..4000 {
            let b = s.beta(k);
            assert!((0.0..=1.0).contains(&b) && b <= prev);
            prev = b;
        }
    }

    #[test]
    fn interpolation_endpoints() {
        let (a, b) = ([0.0, 0.0], [2.0, 4.0]);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        assert_eq!(interpolate(&a, &b, 0.25).unwrap(), vec![0.5, 1.0]);
        assert!(interpolate(&a, &[1.0], 0.5).is_err());
    }

    #[test]
    fn mix_noise_endpoints() {
        let (a, b) = ([0.3, -1.2], [2.0, 0.7]);
        assert_eq!(mix_noise(&a, &b, 0.0).unwrap(), a);
        assert_eq!(mix_noise(&a, &b, 1.0).unwrap(), b);
        assert!(mix_noise(&a, &b, 1.5).is_err());
        assert!(mix_noise(&a, &b, -0.1).is_err());
    }

    #[test]
    fn time_sampler_clamps() {
        let ts = TimeSampler::new(1).sample(10_000, 0);
        assert!(ts.iter().all(|&t| (T_EPS..=1.0 - T_EPS).contains(&t)));
        assert_eq!(ts, TimeSampler::new(1).sample(10_000, 0));
    }

    #[test]
    fn rf_loss_zero_field() {
        let m = zero_model(2);
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0]).unwrap();
        let t = [0.2, 0.5, 0.9];
        let l = loss_value(|tape, b| rf_loss(tape, &m, b, &x, &x, None, &t), &m);
        assert_eq!(l, 0.0);
        let x1 = Tensor::matrix(3, 2, vec![4.0, 6.0, 2.0, 4.5, 6.0, 7.0]).unwrap();
        let l = loss_value(|tape, b| rf_loss(tape, &m, b, &x, &x1, None, &t), &m);
        assert_eq!(l, 25.0);
    }

    #[test]
    fn anneal_limits_match_rf_loss() {
        let mut m = VelocityModel::new(VelocityConfig::new(2, 4, 1), 3).unwrap();
        for p in m.params_mut().tensors_mut() {
            p.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 7 % 11) as f64 - 5.0) * 0.1);
        }
        let x1 = Tensor::matrix(2, 2, vec![0.3, -0.4, 1.1, 0.2]).unwrap();
        let x0 = Tensor::matrix(2, 2, vec![4.0, 0.1, -3.9, 0.3]).unwrap();
        let xp = Tensor::matrix(2, 2, vec![-0.8, 0.5, 0.0, 2.2]).unwrap();
        let t = [0.3, 0.7];
        let sched = AnnealSchedule::new(10);
        let reflow = loss_value(|tape, b| rf_loss(tape, &m, b, &x0, &x1, None, &t), &m);
        let random = loss_value(|tape, b| rf_loss(tape, &m, b, &x0, &xp, None, &t), &m);
        for (k, expect) in [(10, reflow), (25, reflow), (0, random)] {
            let batch = AnnealBatch {
                x1: &x1,
                x0_hat: &x0,
                x1_prime: &xp,
                t: &t,
                k,
            };
            let l = loss_value(|tape, b| annealing_reflow_loss(tape, &m, b, batch, None, sched), &m);
            assert_eq!(l.to_bits(), expect.to_bits());
        }
    }

    #[test]
    fn anneal_zero_field() {
        let m = zero_model(2);
        let x1 = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let x0 = Tensor::zeros(&[1, 2]);
        let batch = AnnealBatch {
            x1: &x1,
            x0_hat: &x0,
            x1_prime: &x0,
            t: &[0.4],
            k: 5,
        };
        let l = loss_value(|tape, b| annealing_reflow_loss(tape, &m, b, batch, None, AnnealSchedule::new(5)), &m);
        assert_eq!(l, 1.0);
    }

    #[test]
    fn distill_zero_field() {
        let m = zero_model(2);
        let x1 = Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap();
        let x0 = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let l = loss_value(|tape, b| distill_loss(tape, &m, b, &x1, &x0, None), &m);
        assert_eq!(l, 4.0);
        let l = loss_value(|tape, b| distill_loss(tape, &m, b, &x1, &x1, None), &m);
        assert_eq!(l, 0.0);
    }

    #[test]
    fn fg_total_is_sum() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.75));
        let b = tape.constant(Tensor::scalar(1.5));
        let s = fg_distill_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.scalar(s), 2.25);
        let z = tape.constant(Tensor::scalar(0.0));
        let s = fg_distill_loss(&mut tape, z, z).unwrap();
        assert_eq!(tape.scalar(s), 0.0);
    }

    #[test]
    fn two_step_rejects_endpoint_times() {
        let m = zero_model(1);
        let x1 = Tensor::zeros(&[1, 1]);
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape, true);
        assert!(two_step_loss(&mut tape, &m, &m, &bound, &x1, None, &[1.0]).is_err());
    }
}
