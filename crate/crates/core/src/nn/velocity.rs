use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embedding::SinusoidalTimeEmbedding;
use super::layers::Linear;
use super::params::{Bound, ParamStore};
use crate::field::VectorField;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityConfig {
    pub data_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub time_max_period: f64,
    pub time_scale: f64,
    pub condition_dim: usize,
}

impl VelocityConfig {
    pub fn new(data_dim: usize, width: usize, depth: usize) -> Self {
        Self {
            data_dim,
            width,
            depth,
            time_dim: 16,
            time_max_period: 100.0,
            time_scale: 10.0,
            condition_dim: 0,
        }
    }

    pub fn with_condition(mut self, condition_dim: usize) -> Self {
        self.condition_dim = condition_dim;
        self
    }

    /// Parameters of the residual blocks (time/condition projections included).
    pub fn trunk_parameter_count(&self) -> usize {
        let w = self.width;
        let per_block = Linear::parameter_count(self.time_dim, w, true)
            + if self.condition_dim > 0 {
                Linear::parameter_count(self.condition_dim, w, false)
            } else {
                0
            }
            + 2 * Linear::parameter_count(w, w, true);
        self.depth * per_block
    }

    pub fn parameter_count(&self) -> usize {
        self.trunk_parameter_count()
            + Linear::parameter_count(self.data_dim, self.width, true)
            + Linear::parameter_count(self.width, self.data_dim, true)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ResidualBlock {
    time: Linear,
    cond: Option<Linear>,
    fc1: Linear,
    fc2: Linear,
}

/// Conditional velocity field `v(x, t, c)`.
///
/// A stack of residual MLP blocks; each block adds a projection of the time
/// embedding (and of the condition vector, when present) before its first
/// affine map. The final affine of every block and the output layer start at
/// zero, so a fresh model is the zero field.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    cfg: VelocityConfig,
    embed: SinusoidalTimeEmbedding,
    store: ParamStore,
    input: Linear,
    blocks: Vec<ResidualBlock>,
    output: Linear,
}

impl VelocityModel {
    pub fn new(cfg: VelocityConfig, seed: u64) -> Result<Self> {
        if cfg.data_dim == 0 || cfg.width == 0 || cfg.depth == 0 {
            return Err(TensorError::Contract(
                "velocity model needs positive data_dim, width and depth".into(),
            ));
        }
        let embed = SinusoidalTimeEmbedding::with_scale(cfg.time_dim, cfg.time_max_period, cfg.time_scale)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = cfg.width;
        let input = Linear::new(&mut store, "input", cfg.data_dim, w, true, false, &mut rng);
        let blocks = (0..cfg.depth)
            .map(|i| ResidualBlock {
                time: Linear::new(&mut store, &format!("block{i}.time"), cfg.time_dim, w, true, false, &mut rng),
                cond: (cfg.condition_dim > 0).then(|| {
                    Linear::new(&mut store, &format!("block{i}.cond"), cfg.condition_dim, w, false, false, &mut rng)
                }),
                fc1: Linear::new(&mut store, &format!("block{i}.fc1"), w, w, true, false, &mut rng),
                fc2: Linear::new(&mut store, &format!("block{i}.fc2"), w, w, true, true, &mut rng),
            })
            .collect();
        let output = Linear::new(&mut store, "output", w, cfg.data_dim, true, true, &mut rng);
        Ok(Self {
            cfg,
            embed,
            store,
            input,
            blocks,
            output,
        })
    }

    pub fn config(&self) -> &VelocityConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.numel()
    }

    fn check_condition(&self, tape: &Tape, rows: usize, c: Option<Var>) -> Result<()> {
        match (self.cfg.condition_dim, c) {
            (0, None) => Ok(()),
            (0, Some(_)) => Err(TensorError::Contract(
                "unconditional model was given a condition".into(),
            )),
            (_, None) => Err(TensorError::Contract("conditional model needs a condition".into())),
            (d, Some(c)) => {
                let s = tape.shape(c);
                if s != [rows, d] {
                    return Err(TensorError::ShapeMismatch {
                        op: "velocity condition",
                        lhs: s.to_vec(),
                        rhs: vec![rows, d],
                    });
                }
                Ok(())
            }
        }
    }

    /// `x: [batch × data_dim]`, one time per row, `c: [batch × condition_dim]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, t: &[f64], c: Option<Var>) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.data_dim {
            return Err(TensorError::ShapeMismatch {
                op: "velocity input",
                lhs: shape,
                rhs: vec![t.len(), self.cfg.data_dim],
            });
        }
        let rows = shape[0];
        if t.len() != rows {
            return Err(TensorError::Contract(format!(
                "{} times for a batch of {rows}",
                t.len()
            )));
        }
        self.check_condition(tape, rows, c)?;
        let temb = tape.constant(self.embed.embed_batch(t)?);
        let mut h = self.input.forward(tape, bound, x)?;
        for block in &self.blocks {
            let mut u = block.time.forward(tape, bound, temb)?;
            u = tape.add(h, u)?;
            if let (Some(proj), Some(c)) = (&block.cond, c) {
                let cp = proj.forward(tape, bound, c)?;
                u = tape.add(u, cp)?;
            }
            let z = block.fc1.forward(tape, bound, u)?;
            let z = tape.tanh(z)?;
            let z = block.fc2.forward(tape, bound, z)?;
            h = tape.add(h, z)?;
        }
        self.output.forward(tape, bound, h)
    }

    /// Gradient-free evaluation.
    pub fn velocity(&self, x: &Tensor, t: &[f64], c: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let cv = c.map(|c| tape.constant(c.clone()));
        let v = self.forward(&mut tape, &bound, xv, t, cv)?;
        Ok(tape.tensor(v))
    }
}

impl VectorField for VelocityModel {
    fn dim(&self) -> usize {
        self.cfg.data_dim
    }

    fn eval(&self, x: &Tensor, t: &[f64], c: Option<&Tensor>) -> Result<Tensor> {
        self.velocity(x, t, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_model_is_zero_field() {
        let m = VelocityModel::new(VelocityConfig::new(2, 8, 2), 1).unwrap();
        let x = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 3.0, 7.0, -9.0]).unwrap();
        let v = m.velocity(&x, &[0.1, 0.5, 1.0], None).unwrap();
        assert_eq!(v.shape(), &[3, 2]);
        assert!(v.data().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn output_shape_matches_input() {
        for d in [2, 16] {
            let m = VelocityModel::new(VelocityConfig::new(d, 6, 1), 3).unwrap();
            let x = Tensor::zeros(&[1, d]);
            assert_eq!(m.velocity(&x, &[0.3], None).unwrap().shape(), &[1, d]);
        }
    }

    #[test]
    fn parameter_count_formula() {
        for (d, w, depth, c) in [(2, 64, 4, 0), (1, 24, 4, 0), (2, 8, 2, 5)] {
            let cfg = VelocityConfig::new(d, w, depth).with_condition(c);
            let m = VelocityModel::new(cfg.clone(), 0).unwrap();
            assert_eq!(m.parameter_count(), cfg.parameter_count());
        }
    }

    #[test]
    fn student_trunk_ratio() {
        let teacher = VelocityConfig::new(80, 256, 20);
        let student = VelocityConfig::new(80, 96, 20);
        // per block: 16·w + w + 2(w² + w)
        assert_eq!(teacher.trunk_parameter_count(), 20 * (16 * 256 + 256 + 2 * (256 * 256 + 256)));
        assert_eq!(student.trunk_parameter_count(), 20 * (16 * 96 + 96 + 2 * (96 * 96 + 96)));
        let r = student.trunk_parameter_count() as f64 / teacher.trunk_parameter_count() as f64;
        assert!(r < 0.2, "{r}");
    }

    #[test]
    fn condition_contract() {
        let cond = VelocityModel::new(VelocityConfig::new(2, 4, 1).with_condition(3), 0).unwrap();
        let plain = VelocityModel::new(VelocityConfig::new(2, 4, 1), 0).unwrap();
        let x = Tensor::zeros(&[2, 2]);
        let c = Tensor::zeros(&[2, 3]);
        assert!(cond.velocity(&x, &[0.5, 0.5], None).is_err());
        assert!(plain.velocity(&x, &[0.5, 0.5], Some(&c)).is_err());
        assert!(cond.velocity(&x, &[0.5, 0.5], Some(&c)).is_ok());
        assert!(cond.velocity(&x, &[0.5, 0.5], Some(&Tensor::zeros(&[2, 2]))).is_err());
    }
}
