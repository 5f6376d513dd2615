//! Sample-quality and efficiency measures computed on raw coordinates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::VectorField;
use crate::rng::{rng_at, Stream};
use crate::solvers::{solve, SolverConfig, SolverError};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Eigenvalues below this count as zero when judging covariance rank.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Moments {
    /// Sample mean and unbiased covariance of a `[n × d]` batch.
    pub fn of(x: &Tensor) -> Result<Self> {
        let (n, d) = batch_shape(x)?;
        if n < 2 {
            return Err(MetricsError::Contract("moments need at least two samples".into()));
        }
        let m = DMatrix::from_row_slice(n, d, x.data());
        let mean = DVector::from_iterator(d, m.column_iter().map(|c| c.sum() / n as f64));
        let mut centred = m;
        for mut row in centred.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = (centred.transpose() * &centred) / (n - 1) as f64;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn batch_shape(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(MetricsError::Contract(format!("expected a [n × d] batch, got {s:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frechet {
    pub distance: f64,
    /// Either covariance has rank below the dimension.
    pub degenerate: bool,
}

fn symmetric(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn psd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let eig = SymmetricEigen::new(symmetric(m));
    let rank = eig.eigenvalues.iter().filter(|&&l| l > RANK_TOLERANCE).count();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    (v * DMatrix::from_diagonal(&roots) * v.transpose(), rank)
}

/// `‖μA − μB‖² + Tr(ΣA + ΣB − 2(ΣA ΣB)^{1/2})`.
///
/// The trace of the product root is taken as `Tr((√ΣA ΣB √ΣA)^{1/2})`, which
/// has the same eigenvalues and is symmetric; negative eigenvalues from
/// round-off are clipped to zero.
pub fn frechet_from_moments(a: &Moments, b: &Moments) -> Result<Frechet> {
    if a.dim() != b.dim() {
        return Err(MetricsError::Contract(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (root_a, rank_a) = psd_sqrt(&a.cov);
    let rank_b = SymmetricEigen::new(symmetric(&b.cov))
        .eigenvalues
        .iter()
        .filter(|&&l| l > RANK_TOLERANCE)
        .count();
    let inner = &root_a * &b.cov * &root_a;
    let cross: f64 = SymmetricEigen::new(symmetric(&inner))
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let shift = (&a.mean - &b.mean).norm_squared();
    let distance = shift + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(Frechet {
        distance: distance.max(0.0),
        degenerate: rank_a < a.dim() || rank_b < b.dim(),
    })
}

pub fn frechet_gauss_distance(a: &Tensor, b: &Tensor) -> Result<Frechet> {
    let (na, d) = batch_shape(a)?;
    let (nb, _) = batch_shape(b)?;
    if na < d + 1 || nb < d + 1 {
        return Err(MetricsError::Contract(format!(
            "need at least {} samples per batch, got {na} and {nb}",
            d + 1
        )));
    }
    frechet_from_moments(&Moments::of(a)?, &Moments::of(b)?)
}

/// 2-Wasserstein distance between two 1-D empirical distributions.
///
/// Equal sizes pair sorted samples; otherwise both quantile functions are
/// read at the midpoints of `max(n_a, n_b)` equal-mass cells.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let m = a.len().max(b.len());
    let quantile = |s: &[f64], i: usize| s[((i as f64 + 0.5) * s.len() as f64 / m as f64) as usize];
    let total: f64 = (0..m).map(|i| (quantile(&a, i) - quantile(&b, i)).powi(2)).sum();
    (total / m as f64).sqrt()
}

/// Unit directions drawn from the `Projection` stream.
pub fn projection_directions(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|p| {
            let mut rng = rng_at(seed, Stream::Projection, p as u64);
            loop {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break v.into_iter().map(|x| x / norm).collect();
                }
            }
        })
        .collect()
}

/// Mean over random unit directions of the projected 1-D 2-Wasserstein
/// distance.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, n_projections: usize, seed: u64) -> Result<f64> {
    if n_projections < 16 {
        return Err(MetricsError::Contract("sliced Wasserstein needs at least 16 projections".into()));
    }
    let (na, d) = batch_shape(a)?;
    let (nb, db) = batch_shape(b)?;
    if d != db {
        return Err(MetricsError::Contract(format!("dimension mismatch: {d} vs {db}")));
    }
    if na == 0 || nb == 0 {
        return Err(MetricsError::Contract("empty batch".into()));
    }
    let project = |x: &Tensor, dir: &[f64]| -> Vec<f64> {
        x.data()
            .chunks_exact(d)
            .map(|row| row.iter().zip(dir).map(|(p, q)| p * q).sum())
            .collect()
    };
    let per: Vec<f64> = projection_directions(d, n_projections, seed)
        .par_iter()
        .map(|dir| wasserstein_1d(&project(a, dir), &project(b, dir)))
        .collect();
    Ok(per.iter().sum::<f64>() / n_projections as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub mean_nfe: f64,
    pub time_per_sample: f64,
}

/// Generates from `x1` and reports mean evaluations and wall time per sample.
pub fn efficiency_probe(
    field: &dyn VectorField,
    x1: &Tensor,
    c: Option<&Tensor>,
    cfg: &SolverConfig,
) -> Result<(Efficiency, Tensor)> {
    let n = batch_shape(x1)?.0.max(1);
    let report = solve(field, x1, c, cfg)?;
    Ok((
        Efficiency {
            mean_nfe: report.mean_nfe(),
            time_per_sample: report.wall_time / n as f64,
        },
        report.endpoint,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Always `"FD-analog"`: a Fréchet distance between Gaussian fits of raw
    /// coordinates.
    pub frechet_label: String,
    pub frechet_gauss: f64,
    pub degenerate_covariance: bool,
    pub sliced_wasserstein: f64,
    pub sliced_projections: usize,
    pub straightness: Option<f64>,
    pub mean_nfe: Option<f64>,
    pub time_per_sample: Option<f64>,
    pub n_samples: usize,
    pub n_reference: usize,
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn compare(samples: &Tensor, reference: &Tensor, n_projections: usize, seed: u64) -> Result<Self> {
        let fd = frechet_gauss_distance(samples, reference)?;
        Ok(Self {
            frechet_label: "FD-analog".into(),
            frechet_gauss: fd.distance,
            degenerate_covariance: fd.degenerate,
            sliced_wasserstein: sliced_wasserstein(samples, reference, n_projections, seed)?,
            sliced_projections: n_projections,
            straightness: None,
            mean_nfe: None,
            time_per_sample: None,
            n_samples: samples.rows(),
            n_reference: reference.rows(),
            config: serde_json::Value::Null,
        })
    }

    /// Copy with wall-clock fields cleared, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        Self {
            time_per_sample: None,
            ..self.clone()
        }
    }
}
