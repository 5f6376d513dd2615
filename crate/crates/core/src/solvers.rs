//! Generation by integrating `dx = v(x, t, c) dt` from `t = 1` (noise) down to
//! `t = 0` (data).
//!
//! Both solvers work on a batch of independent samples. The adaptive solver
//! keeps a separate step size, error history and evaluation count per sample;
//! the batch is only used to share vector-field evaluations, so a sample's
//! result does not depend on which other samples it was integrated with.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use web_time::Instant;

use crate::field::VectorField;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver config: {0}")]
    Config(String),
    #[error("sample {sample}: evaluation budget of {max_nfe} exceeded")]
    BudgetExceeded { sample: usize, max_nfe: usize },
    #[error("sample {sample}: step size {h:e} underflow at t = {t}")]
    Stiff { sample: usize, t: f64, h: f64 },
    #[error("vector field failed at step {step}: {source}")]
    Field { step: usize, source: TensorError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Euler,
    Rk45,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub kind: SolverKind,
    pub euler_steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub max_nfe: usize,
    pub record_trajectory: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::rk45(1e-5, 1e-5)
    }
}

impl SolverConfig {
    pub fn euler(steps: usize) -> Self {
        Self {
            kind: SolverKind::Euler,
            euler_steps: steps,
            rtol: 1e-5,
            atol: 1e-5,
            max_nfe: 100_000,
            record_trajectory: false,
        }
    }

    pub fn rk45(rtol: f64, atol: f64) -> Self {
        Self {
            kind: SolverKind::Rk45,
            euler_steps: 1,
            rtol,
            atol,
            max_nfe: 100_000,
            record_trajectory: false,
        }
    }

    pub fn with_trajectory(mut self, flag: bool) -> Self {
        self.record_trajectory = flag;
        self
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if self.euler_steps < 1 {
            return Err(SolverError::Config("euler_steps must be at least 1".into()));
        }
        if !(self.rtol > 0.0) || !(self.atol > 0.0) {
            return Err(SolverError::Config("rtol and atol must be positive".into()));
        }
        if self.max_nfe < 2 {
            return Err(SolverError::Config("max_nfe must be at least 2".into()));
        }
        Ok(())
    }
}

/// `(t, x)` knots from `t = 1` down to `t = 0`.
pub type Trajectory = Vec<(f64, Vec<f64>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    /// `[batch × dim]` states at `t = 0`.
    pub endpoint: Tensor,
    /// Vector-field evaluations per sample.
    pub nfe: Vec<usize>,
    pub accepted: Vec<usize>,
    pub rejected: Vec<usize>,
    pub wall_time: f64,
    pub trajectories: Option<Vec<Trajectory>>,
    /// Per-sample failure; a failed sample's endpoint holds its last state.
    pub failures: Vec<Option<SolverError>>,
}

impl SolverReport {
    pub fn mean_nfe(&self) -> f64 {
        if self.nfe.is_empty() {
            return 0.0;
        }
        self.nfe.iter().sum::<usize>() as f64 / self.nfe.len() as f64
    }

    pub fn failure_count(&self) -> usize {
        self.failures.iter().filter(|f| f.is_some()).count()
    }

    fn first_failure(&self) -> Option<SolverError> {
        self.failures.iter().flatten().next().cloned()
    }
}

fn eval_rows(
    field: &dyn VectorField,
    x: Tensor,
    t: &[f64],
    c: Option<&Tensor>,
    rows: &[usize],
    step: usize,
) -> Result<Tensor, SolverError> {
    let sub = c.map(|c| c.select_rows(rows));
    field
        .eval(&x, t, sub.as_ref())
        .map_err(|source| SolverError::Field { step, source })
}

fn check_inputs(field: &dyn VectorField, x1: &Tensor, c: Option<&Tensor>) -> Result<(), SolverError> {
    if x1.shape().len() != 2 || x1.cols() != field.dim() {
        return Err(SolverError::Config(format!(
            "initial state of shape {:?} for a field of dimension {}",
            x1.shape(),
            field.dim()
        )));
    }
    if let Some(c) = c {
        if c.rows() != x1.rows() {
            return Err(SolverError::Config(format!(
                "{} condition rows for {} samples",
                c.rows(),
                x1.rows()
            )));
        }
    }
    Ok(())
}

/// `N` uniform steps `x ← x − v(x, t, c)/N` at `t = 1, 1 − 1/N, …, 1/N`.
pub fn euler_solve(
    field: &dyn VectorField,
    x1: &Tensor,
    c: Option<&Tensor>,
    cfg: &SolverConfig,
) -> Result<SolverReport, SolverError> {
    cfg.validate()?;
    check_inputs(field, x1, c)?;
    let clock = Instant::now();
    let n = cfg.euler_steps;
    let (rows, dim) = (x1.rows(), x1.cols());
    let all: Vec<usize> = (0..rows).collect();
    let mut x = x1.clone();
    let mut traj = cfg
        .record_trajectory
        .then(|| (0..rows).map(|i| vec![(1.0, x1.row(i).to_vec())]).collect::<Vec<_>>());
    let dt = 1.0 / n as f64;
    for step in 0..n {
        let t = (n - step) as f64 / n as f64;
        let v = eval_rows(field, x.clone(), &vec![t; rows], c, &all, step)?;
        let next: Vec<f64> = x.data().iter().zip(v.data()).map(|(a, b)| a - dt * b).collect();
        x = Tensor::new(vec![rows, dim], next).map_err(|source| SolverError::Field { step, source })?;
        if let Some(traj) = traj.as_mut() {
            let tn = (n - step - 1) as f64 / n as f64;
            for (i, tr) in traj.iter_mut().enumerate() {
                tr.push((tn, x.row(i).to_vec()));
            }
        }
    }
    Ok(SolverReport {
        endpoint: x,
        nfe: vec![n; rows],
        accepted: vec![n; rows],
        rejected: vec![0; rows],
        wall_time: clock.elapsed().as_secs_f64(),
        trajectories: traj,
        failures: vec![None; rows],
    })
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights (equal to the last row of `A`; FSAL).
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
// PI controller exponents (Hairer & Wanner's DOPRI5 defaults).
const PI_BETA: f64 = 0.04;
const PI_ALPHA: f64 = 0.2 - 0.75 * PI_BETA;
const MIN_STEP: f64 = 1e-10;

#[derive(Debug, Clone)]
struct SampleState {
    /// Elapsed integration variable `s = 1 − t`.
    s: f64,
    y: Vec<f64>,
    h: f64,
    k1: Vec<f64>,
    err_prev: f64,
    nfe: usize,
    accepted: usize,
    rejected: usize,
    done: bool,
    failure: Option<SolverError>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Adaptive Dormand–Prince 5(4) with first-same-as-last reuse.
///
/// NFE per sample is `1 + 6·(accepted + rejected)`: one evaluation at `t = 1`
/// and six new stages per attempted step. The error of a step is
/// `‖y5 − y4‖∞ / max(rtol·max(‖y‖∞, ‖y5‖∞), atol)`; the final step is clipped
/// so each sample ends exactly at `t = 0`. Failures are reported per sample.
pub fn rk45_integrate(
    field: &dyn VectorField,
    x1: &Tensor,
    c: Option<&Tensor>,
    cfg: &SolverConfig,
) -> Result<SolverReport, SolverError> {
    cfg.validate()?;
    check_inputs(field, x1, c)?;
    let clock = Instant::now();
    let (rows, dim) = (x1.rows(), x1.cols());
    let all: Vec<usize> = (0..rows).collect();
    let neg = |v: Tensor| -> Vec<f64> { v.into_data().into_iter().map(|a| -a).collect() };

    // dy/ds = −v(y, 1 − s)
    let k1_all = neg(eval_rows(field, x1.clone(), &vec![1.0; rows], c, &all, 0)?);
    let mut states: Vec<SampleState> = (0..rows)
        .map(|i| {
            let y = x1.row(i).to_vec();
            let k1 = k1_all[i * dim..(i + 1) * dim].to_vec();
            let scale = (cfg.rtol * inf_norm(&y)).max(cfg.atol);
            let d0 = inf_norm(&y) / scale;
            let d1 = inf_norm(&k1) / scale;
            let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-2 } else { 0.01 * d0 / d1 };
            SampleState {
                s: 0.0,
                y,
                h: h.min(0.1),
                k1,
                err_prev: 1e-4,
                nfe: 1,
                accepted: 0,
                rejected: 0,
                done: false,
                failure: None,
            }
        })
        .collect();
    let mut traj = cfg
        .record_trajectory
        .then(|| (0..rows).map(|i| vec![(1.0, x1.row(i).to_vec())]).collect::<Vec<_>>());

    let mut round = 0usize;
    loop {
        let mut active: Vec<usize> = Vec::new();
        for (i, st) in states.iter_mut().enumerate() {
            if st.done {
                continue;
            }
            if st.nfe + 6 > cfg.max_nfe {
                st.failure = Some(SolverError::BudgetExceeded {
                    sample: i,
                    max_nfe: cfg.max_nfe,
                });
                st.done = true;
                continue;
            }
            if st.s + st.h > 1.0 {
                st.h = 1.0 - st.s;
            }
            active.push(i);
        }
        if active.is_empty() {
            break;
        }
        round += 1;
        let n = active.len();
        // k[stage][row_in_active * dim + j]
        let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
        k.push(active.iter().flat_map(|&i| states[i].k1.iter().copied()).collect());
        for stage in 1..7 {
            let mut xs = Vec::with_capacity(n * dim);
            let mut ts = Vec::with_capacity(n);
            for (a, &i) in active.iter().enumerate() {
                let st = &states[i];
                for j in 0..dim {
                    let mut acc = 0.0;
                    for (p, kp) in k.iter().enumerate() {
                        acc += A[stage][p] * kp[a * dim + j];
                    }
                    xs.push(st.y[j] + st.h * acc);
                }
                ts.push((1.0 - (st.s + C[stage] * st.h)).clamp(0.0, 1.0));
            }
            let x = Tensor::new(vec![n, dim], xs).map_err(|source| SolverError::Field { step: round, source })?;
            k.push(neg(eval_rows(field, x, &ts, c, &active, round)?));
        }
        for (a, &i) in active.iter().enumerate() {
            let st = &mut states[i];
            st.nfe += 6;
            let mut y5 = vec![0.0; dim];
            let mut err = 0.0_f64;
            for j in 0..dim {
                let (mut s5, mut s4) = (0.0, 0.0);
                for stage in 0..7 {
                    s5 += B5[stage] * k[stage][a * dim + j];
                    s4 += B4[stage] * k[stage][a * dim + j];
                }
                y5[j] = st.y[j] + st.h * s5;
                err = err.max((st.h * (s5 - s4)).abs());
            }
            let scale = (cfg.rtol * inf_norm(&st.y).max(inf_norm(&y5))).max(cfg.atol);
            let err = err / scale;
            if err <= 1.0 {
                st.accepted += 1;
                let last = st.s + st.h >= 1.0 - 1e-14;
                st.s = if last { 1.0 } else { st.s + st.h };
                st.y = y5;
                st.k1 = k[6][a * dim..(a + 1) * dim].to_vec();
                if let Some(traj) = traj.as_mut() {
                    traj[i].push((1.0 - st.s, st.y.clone()));
                }
                let fac = if err == 0.0 {
                    FAC_MAX
                } else {
                    (SAFETY * err.powf(-PI_ALPHA) * st.err_prev.powf(PI_BETA)).clamp(FAC_MIN, FAC_MAX)
                };
                st.err_prev = err.max(1e-4);
                st.h *= fac;
                if last {
                    st.done = true;
                }
            } else {
                st.rejected += 1;
                st.h *= (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, 1.0);
                if st.h < MIN_STEP {
                    st.failure = Some(SolverError::Stiff {
                        sample: i,
                        t: 1.0 - st.s,
                        h: st.h,
                    });
                    st.done = true;
                }
            }
        }
    }

    let mut data = Vec::with_capacity(rows * dim);
    for st in &states {
        data.extend_from_slice(&st.y);
    }
    Ok(SolverReport {
        endpoint: Tensor::new(vec![rows, dim], data).map_err(|source| SolverError::Field { step: round, source })?,
        nfe: states.iter().map(|s| s.nfe).collect(),
        accepted: states.iter().map(|s| s.accepted).collect(),
        rejected: states.iter().map(|s| s.rejected).collect(),
        wall_time: clock.elapsed().as_secs_f64(),
        trajectories: traj,
        failures: states.into_iter().map(|s| s.failure).collect(),
    })
}

/// As [`rk45_integrate`], but any per-sample failure is an error.
pub fn rk45_solve(
    field: &dyn VectorField,
    x1: &Tensor,
    c: Option<&Tensor>,
    cfg: &SolverConfig,
) -> Result<SolverReport, SolverError> {
    let report = rk45_integrate(field, x1, c, cfg)?;
    match report.first_failure() {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Dispatches on `cfg.kind`.
pub fn solve(
    field: &dyn VectorField,
    x1: &Tensor,
    c: Option<&Tensor>,
    cfg: &SolverConfig,
) -> Result<SolverReport, SolverError> {
    match cfg.kind {
        SolverKind::Euler => euler_solve(field, x1, c, cfg),
        SolverKind::Rk45 => rk45_solve(field, x1, c, cfg),
    }
}

/// Mean over the batch of `∫₀¹ ‖(x_end − x1) + v(x_t, t, c)‖² dt`, estimated
/// on an Euler trajectory with `probe_steps` knots (left Riemann sum).
///
/// Zero exactly when every trajectory moves along its chord at constant speed.
pub fn straightness(
    field: &dyn VectorField,
    x1: &Tensor,
    c: Option<&Tensor>,
    probe_steps: usize,
) -> Result<f64, SolverError> {
    if probe_steps < 8 {
        return Err(SolverError::Config("straightness needs at least 8 probe steps".into()));
    }
    check_inputs(field, x1, c)?;
    let (rows, dim) = (x1.rows(), x1.cols());
    if rows == 0 {
        return Ok(0.0);
    }
    let all: Vec<usize> = (0..rows).collect();
    let n = probe_steps;
    let dt = 1.0 / n as f64;
    let mut x = x1.data().to_vec();
    let mut velocities: Vec<Vec<f64>> = Vec::with_capacity(n);
    for step in 0..n {
        let t = (n - step) as f64 / n as f64;
        let xt = Tensor::new(vec![rows, dim], x.clone()).map_err(|source| SolverError::Field { step, source })?;
        let v = eval_rows(field, xt, &vec![t; rows], c, &all, step)?.into_data();
        x.iter_mut().zip(&v).for_each(|(a, b)| *a -= dt * b);
        velocities.push(v);
    }
    let mut total = 0.0;
    for v in &velocities {
        for p in 0..rows * dim {
            let chord = x[p] - x1.data()[p];
            total += (chord + v[p]).powi(2);
        }
    }
    Ok(total / (n as f64 * rows as f64))
}
