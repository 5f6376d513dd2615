//! Stage orchestration: teacher training, pair generation, annealing reflow,
//! pair regeneration and flow-guided distillation.

mod checkpoint;
mod container;
mod eval;
mod generate;
mod pairs;
mod train;

pub use checkpoint::{Checkpoint, Stage};
pub use eval::{evaluate_model, evaluate_samples, reference_samples, EvalOptions};
pub use generate::{integrate, prior_draws, Generated, CHUNK};
pub use pairs::{generate_pairs, PairSet, TokenLayout, MAX_SKIP_FRACTION};
pub use train::{init_teacher, learning_rate_at, stage_seed, train_anneal_reflow, train_distill, train_teacher, StageOutput};

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::DataError;
use crate::io::IoError;
use crate::metrics::{MetricsError, MetricsReport};
use crate::rng::derive;
use crate::solvers::{SolverConfig, SolverError};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    InvalidConfig(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("pair set was generated by model {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("{} training diverged at iteration {iteration}", stage.name())]
    Diverged {
        stage: Stage,
        iteration: u64,
        /// State before the failing step.
        checkpoint: Box<Checkpoint>,
    },
    #[error("solver gave up on {skipped} of {requested} samples")]
    TooManySkipped { skipped: usize, requested: usize },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Seed of the pair set generated from a checkpoint of `stage`.
pub fn pair_seed(cfg: &RunConfig, stage: Stage) -> u64 {
    derive(cfg.seeds.pairs, stage as u64 + 1)
}

/// Every stage of one run, in order.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub teacher: StageOutput,
    pub teacher_pairs: PairSet,
    pub student: StageOutput,
    pub student_pairs: PairSet,
    pub distilled: StageOutput,
    /// Teacher sampled with the pair solver.
    pub teacher_report: MetricsReport,
    /// Distilled model, one Euler step.
    pub one_step_report: MetricsReport,
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let n = cfg.stages.pairs.count;
    let teacher = train_teacher(cfg, None, None)?;
    let teacher_pairs = generate_pairs(&teacher.checkpoint, n, &cfg.solver, pair_seed(cfg, Stage::Teacher))?;
    let student = train_anneal_reflow(cfg, &teacher.checkpoint, &teacher_pairs, None, None)?;
    let student_pairs = generate_pairs(&student.checkpoint, n, &cfg.solver, pair_seed(cfg, Stage::AnnealReflow))?;
    let distilled = train_distill(cfg, &student.checkpoint, &student_pairs, None, None)?;
    let (teacher_report, _) = evaluate_model(
        &teacher.checkpoint.model,
        &cfg.dataset,
        &EvalOptions::from_config(cfg, cfg.solver.clone()),
    )?;
    let (one_step_report, _) = evaluate_model(
        &distilled.checkpoint.model,
        &cfg.dataset,
        &EvalOptions::from_config(cfg, SolverConfig::euler(1)),
    )?;
    Ok(PipelineRun {
        teacher,
        teacher_pairs,
        student,
        student_pairs,
        distilled,
        teacher_report,
        one_step_report,
    })
}
