use rayon::prelude::*;
use web_time::Instant;

use super::Result;
use crate::data::{sample_noise_range, Distribution};
use crate::nn::FlowModel;
use crate::solvers::{euler_solve, rk45_integrate, SolverConfig, SolverKind, Trajectory};
use crate::tensor::Tensor;

/// Samples per unit of parallel work. Fixed so results never depend on the
/// thread count.
pub const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub x1: Tensor,
    pub x0: Tensor,
    pub tokens: Option<Vec<Vec<usize>>>,
    pub nfe: Vec<usize>,
    /// `false` where the solver gave up on a sample.
    pub ok: Vec<bool>,
    pub trajectories: Option<Vec<Trajectory>>,
    pub wall_time: f64,
}

impl Generated {
    pub fn mean_nfe(&self) -> f64 {
        if self.nfe.is_empty() {
            return 0.0;
        }
        self.nfe.iter().sum::<usize>() as f64 / self.nfe.len() as f64
    }

    pub fn time_per_sample(&self) -> f64 {
        self.wall_time / self.nfe.len().max(1) as f64
    }
}

/// Noise rows and condition sequences `0..n` for `seed`.
pub fn prior_draws(dist: &Distribution, n: usize, seed: u64) -> (Tensor, Option<Vec<Vec<usize>>>) {
    let x1 = sample_noise_range(n, dist.dim(), seed, 0);
    let tokens = dist
        .is_conditional()
        .then(|| (0..n as u64).map(|i| dist.condition_at(seed, i).expect("conditional")).collect());
    (x1, tokens)
}

/// Integrates every row of `x1` from noise to data.
///
/// With `tolerate_failures` an adaptive-solver failure marks the sample in
/// `ok` instead of aborting.
pub fn integrate(
    model: &FlowModel,
    x1: &Tensor,
    tokens: Option<&[Vec<usize>]>,
    solver: &SolverConfig,
    tolerate_failures: bool,
) -> Result<Generated> {
    let clock = Instant::now();
    let n = x1.rows();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let rows: Vec<usize> = (s..(s + CHUNK).min(n)).collect();
            let xs = x1.select_rows(&rows);
            let toks = tokens.map(|t| t[s..s + rows.len()].to_vec());
            let c = model.condition(toks.as_deref())?;
            let report = match solver.kind {
                SolverKind::Euler => euler_solve(&model.velocity, &xs, c.as_ref(), solver)?,
                SolverKind::Rk45 => rk45_integrate(&model.velocity, &xs, c.as_ref(), solver)?,
            };
            if !tolerate_failures {
                if let Some(e) = report.failures.iter().flatten().next() {
                    return Err(e.clone().into());
                }
            }
            Ok(report)
        })
        .collect::<Result<Vec<_>>>()?;
    let dim = x1.cols();
    let mut x0 = Vec::with_capacity(n * dim);
    let mut nfe = Vec::with_capacity(n);
    let mut ok = Vec::with_capacity(n);
    let mut trajectories = solver.record_trajectory.then(Vec::new);
    for r in parts {
        x0.extend_from_slice(r.endpoint.data());
        nfe.extend_from_slice(&r.nfe);
        ok.extend(r.failures.iter().map(Option::is_none));
        if let (Some(all), Some(t)) = (trajectories.as_mut(), r.trajectories) {
            all.extend(t);
        }
    }
    Ok(Generated {
        x1: x1.clone(),
        x0: Tensor::new(vec![n, dim], x0)?,
        tokens: tokens.map(<[_]>::to_vec),
        nfe,
        ok,
        trajectories,
        wall_time: clock.elapsed().as_secs_f64(),
    })
}
