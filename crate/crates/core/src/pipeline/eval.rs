use serde_json::json;

use super::generate::{integrate, prior_draws, Generated};
use super::Result;
use crate::config::RunConfig;
use crate::data::Distribution;
use crate::metrics::MetricsReport;
use crate::nn::FlowModel;
use crate::rng::derive;
use crate::solvers::{straightness, SolverConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub solver: SolverConfig,
    pub samples: usize,
    pub projections: usize,
    pub probe_steps: usize,
    pub probe_samples: usize,
    pub seed: u64,
}

impl EvalOptions {
    pub fn from_config(cfg: &RunConfig, solver: SolverConfig) -> Self {
        Self {
            solver,
            samples: cfg.metrics.samples,
            projections: cfg.metrics.projections,
            probe_steps: cfg.metrics.probe_steps,
            probe_samples: cfg.metrics.probe_samples,
            seed: cfg.seeds.eval,
        }
    }

    fn echo(&self) -> serde_json::Value {
        json!({
            "solver": self.solver,
            "samples": self.samples,
            "projections": self.projections,
            "probe_steps": self.probe_steps,
            "probe_samples": self.probe_samples,
            "seed": self.seed,
        })
    }
}

/// Held-out data the generated samples are compared against.
pub fn reference_samples(dist: &Distribution, n: usize, seed: u64) -> Result<Tensor> {
    Ok(dist.sample(n, derive(seed, 2))?.x)
}

/// Distances between two sample sets.
pub fn evaluate_samples(samples: &Tensor, reference: &Tensor, opts: &EvalOptions) -> Result<MetricsReport> {
    let mut report = MetricsReport::compare(samples, reference, opts.projections, derive(opts.seed, 3))?;
    report.config = opts.echo();
    Ok(report)
}

/// Generates `opts.samples` points and reports distances to fresh data,
/// evaluation counts, wall time and trajectory straightness.
pub fn evaluate_model(model: &FlowModel, dist: &Distribution, opts: &EvalOptions) -> Result<(MetricsReport, Generated)> {
    let (x1, tokens) = prior_draws(dist, opts.samples, derive(opts.seed, 1));
    let generated = integrate(model, &x1, tokens.as_deref(), &opts.solver, false)?;
    let reference = reference_samples(dist, opts.samples, opts.seed)?;
    let mut report = evaluate_samples(&generated.x0, &reference, opts)?;
    let m = opts.probe_samples.min(opts.samples);
    let rows: Vec<usize> = (0..m).collect();
    let probe_tokens = tokens.as_ref().map(|t| t[..m].to_vec());
    let c = model.condition(probe_tokens.as_deref())?;
    report.straightness = Some(straightness(
        &model.velocity,
        &x1.select_rows(&rows),
        c.as_ref(),
        opts.probe_steps,
    )?);
    report.mean_nfe = Some(generated.mean_nfe());
    report.time_per_sample = Some(generated.time_per_sample());
    Ok((report, generated))
}
