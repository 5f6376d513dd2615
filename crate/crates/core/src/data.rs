//! Toy data distributions, the Gaussian prior and a closed-form velocity oracle.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::VectorField;
use crate::rng::{rng_at, standard_normals, Stream};
use crate::tensor::{self, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid distribution: {0}")]
    Config(String),
    #[error("singular velocity oracle at t = {t}: denominator {denominator:e}")]
    Singular { t: f64, denominator: f64 },
    #[error("time {0} outside [0, 1]")]
    Domain(f64),
}

/// Data distribution π0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distribution {
    /// Isotropic Gaussian `N(mean, sigma² I)`.
    GaussNd { mean: Vec<f64>, sigma: f64 },
    /// Equal-weight Gaussians on a circle in the plane.
    MixtureRing {
        components: usize,
        radius: f64,
        sigma: f64,
    },
    /// Uniform over the even cells of a `cells × cells` board on `[-half_width, half_width]²`.
    Checkerboard { cells: usize, half_width: f64 },
    /// Ring mixture whose component is chosen by a token sequence.
    CondSeq {
        vocab: usize,
        seq_len: usize,
        components: usize,
        radius: f64,
        sigma: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CondSample {
    pub x0: Vec<f64>,
    pub tokens: Option<Vec<usize>>,
    pub class: Option<usize>,
}

/// A batch of data points, with token sequences and classes for `cond_seq`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub tokens: Option<Vec<Vec<usize>>>,
    pub classes: Option<Vec<usize>>,
}

impl Distribution {
    pub fn mixture_ring() -> Self {
        Distribution::MixtureRing {
            components: 8,
            radius: 4.0,
            sigma: 0.2,
        }
    }

    pub fn cond_seq() -> Self {
        Distribution::CondSeq {
            vocab: 4,
            seq_len: 2,
            components: 8,
            radius: 4.0,
            sigma: 0.2,
        }
    }

    pub fn gauss(mean: Vec<f64>, sigma: f64) -> Self {
        Distribution::GaussNd { mean, sigma }
    }

    pub fn dim(&self) -> usize {
        match self {
            Distribution::GaussNd { mean, .. } => mean.len(),
            _ => 2,
        }
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self, Distribution::CondSeq { .. })
    }

    /// `(vocab, seq_len)` for conditional distributions.
    pub fn token_layout(&self) -> Option<(usize, usize)> {
        match self {
            Distribution::CondSeq { vocab, seq_len, .. } => Some((*vocab, *seq_len)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(DataError::Config(format!("{name} must be positive, got {v}")))
            }
        };
        match self {
            Distribution::GaussNd { mean, sigma } => {
                if mean.is_empty() {
                    return Err(DataError::Config("gauss_nd needs a non-empty mean".into()));
                }
                if mean.iter().any(|m| !m.is_finite()) {
                    return Err(DataError::Config("gauss_nd mean must be finite".into()));
                }
                positive("sigma", *sigma)
            }
            Distribution::MixtureRing {
                components,
                radius,
                sigma,
            } => {
                if *components == 0 {
                    return Err(DataError::Config("mixture needs at least one component".into()));
                }
                positive("radius", *radius)?;
                positive("sigma", *sigma)
            }
            Distribution::Checkerboard { cells, half_width } => {
                if *cells < 2 {
                    return Err(DataError::Config("checkerboard needs at least 2 cells per side".into()));
                }
                positive("half_width", *half_width)
            }
            Distribution::CondSeq {
                vocab,
                seq_len,
                components,
                radius,
                sigma,
            } => {
                if *vocab == 0 || *seq_len == 0 {
                    return Err(DataError::Config("cond_seq needs positive vocab and seq_len".into()));
                }
                if *components == 0 {
                    return Err(DataError::Config("mixture needs at least one component".into()));
                }
                positive("radius", *radius)?;
                positive("sigma", *sigma)
            }
        }
    }

    /// Class of a token sequence: its base-`vocab` value modulo `components`.
    pub fn class_of(&self, tokens: &[usize]) -> Option<usize> {
        match self {
            Distribution::CondSeq {
                vocab, components, ..
            } => {
                let mut acc = 0usize;
                for &t in tokens.iter().rev() {
                    acc = (acc * vocab + t) % components;
                }
                Some(acc)
            }
            _ => None,
        }
    }

    /// Mean of mixture component `k`.
    pub fn component_mean(&self, k: usize) -> Option<[f64; 2]> {
        match self {
            Distribution::MixtureRing {
                components, radius, ..
            }
            | Distribution::CondSeq {
                components, radius, ..
            } => {
                let a = 2.0 * PI * k as f64 / *components as f64;
                Some([radius * a.cos(), radius * a.sin()])
            }
            _ => None,
        }
    }

    /// Token sequence drawn from the uniform condition prior.
    pub fn condition_at(&self, seed: u64, index: u64) -> Option<Vec<usize>> {
        let (vocab, len) = self.token_layout()?;
        let mut rng = rng_at(seed, Stream::Condition, index);
        Some((0..len).map(|_| rng.random_range(0..vocab)).collect())
    }

    /// Sample number `index` of the stream identified by `seed`.
    pub fn sample_at(&self, seed: u64, index: u64) -> CondSample {
        let mut rng = rng_at(seed, Stream::Data, index);
        match self {
            Distribution::GaussNd { mean, sigma } => {
                let z = standard_normals(&mut rng, mean.len());
                CondSample {
                    x0: mean.iter().zip(z).map(|(m, z)| m + sigma * z).collect(),
                    tokens: None,
                    class: None,
                }
            }
            Distribution::MixtureRing {
                components, sigma, ..
            } => {
                let k = rng.random_range(0..*components);
                let mu = self.component_mean(k).expect("ring");
                let z = standard_normals(&mut rng, 2);
                CondSample {
                    x0: vec![mu[0] + sigma * z[0], mu[1] + sigma * z[1]],
                    tokens: None,
                    class: Some(k),
                }
            }
            Distribution::Checkerboard { cells, half_width } => {
                let cell = 2.0 * half_width / *cells as f64;
                let (i, j) = loop {
                    let i = rng.random_range(0..*cells);
                    let j = rng.random_range(0..*cells);
                    if (i + j) % 2 == 0 {
                        break (i, j);
                    }
                };
                let u: f64 = rng.random();
                let v: f64 = rng.random();
                CondSample {
                    x0: vec![
                        -half_width + (i as f64 + u) * cell,
                        -half_width + (j as f64 + v) * cell,
                    ],
                    tokens: None,
                    class: Some(i * cells + j),
                }
            }
            Distribution::CondSeq { sigma, .. } => {
                let tokens = self.condition_at(seed, index).expect("conditional");
                let k = self.class_of(&tokens).expect("conditional");
                let mu = self.component_mean(k).expect("ring");
                let z = standard_normals(&mut rng, 2);
                CondSample {
                    x0: vec![mu[0] + sigma * z[0], mu[1] + sigma * z[1]],
                    tokens: Some(tokens),
                    class: Some(k),
                }
            }
        }
    }

    /// Samples `start..start + n` of the stream.
    pub fn sample_range(&self, seed: u64, start: u64, n: usize) -> Result<Batch, DataError> {
        self.validate()?;
        let dim = self.dim();
        let mut data = Vec::with_capacity(n * dim);
        let mut tokens = self.is_conditional().then(|| Vec::with_capacity(n));
        let mut classes = Vec::with_capacity(n);
        for i in 0..n as u64 {
            let s = self.sample_at(seed, start + i);
            data.extend_from_slice(&s.x0);
            if let (Some(all), Some(t)) = (tokens.as_mut(), s.tokens) {
                all.push(t);
            }
            classes.extend(s.class);
        }
        let x = Tensor::new(vec![n, dim], data).map_err(|e| DataError::Config(e.to_string()))?;
        Ok(Batch {
            x,
            tokens,
            classes: (classes.len() == n).then_some(classes),
        })
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Batch, DataError> {
        self.sample_range(seed, 0, n)
    }
}

/// `i.i.d.` standard normal rows `start..start + n`.
pub fn sample_noise_range(n: usize, dim: usize, seed: u64, start: u64) -> Tensor {
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n as u64 {
        let mut rng = rng_at(seed, Stream::Noise, start + i);
        data.extend(standard_normals(&mut rng, dim));
    }
    Tensor::new(vec![n, dim], data).expect("finite normals")
}

pub fn sample_noise(n: usize, dim: usize, seed: u64) -> Tensor {
    sample_noise_range(n, dim, seed, 0)
}

/// `E[x1 − x0 | x_t = x]` for `x1 ~ N(0, I)` independent of `x0 ~ N(μ0, σ0² I)`.
pub fn analytic_velocity_gauss(x: &[f64], t: f64, mu0: &[f64], sigma0: f64) -> Result<Vec<f64>, DataError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(DataError::Domain(t));
    }
    let s2 = sigma0 * sigma0;
    let denominator = t * t + (1.0 - t) * (1.0 - t) * s2;
    if denominator < 1e-12 {
        return Err(DataError::Singular { t, denominator });
    }
    let gain = (t - (1.0 - t) * s2) / denominator;
    Ok(x.iter()
        .zip(mu0)
        .map(|(xi, m)| -m + gain * (xi - (1.0 - t) * m))
        .collect())
}

/// The exact rectified-flow field of a Gaussian data distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussOracleField {
    pub mean: Vec<f64>,
    pub sigma: f64,
}

impl VectorField for GaussOracleField {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn eval(&self, x: &Tensor, t: &[f64], _c: Option<&Tensor>) -> tensor::Result<Tensor> {
        let d = self.dim();
        if x.shape().len() != 2 || x.cols() != d || x.rows() != t.len() {
            return Err(TensorError::ShapeMismatch {
                op: "gauss oracle",
                lhs: x.shape().to_vec(),
                rhs: vec![t.len(), d],
            });
        }
        let mut out = Vec::with_capacity(x.numel());
        for (i, &ti) in t.iter().enumerate() {
            let v = analytic_velocity_gauss(x.row(i), ti, &self.mean, self.sigma)
                .map_err(|e| TensorError::Contract(e.to_string()))?;
            out.extend(v);
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}
