use rand::Rng;
use web_time::Instant;

use super::checkpoint::{Checkpoint, Stage};
use super::pairs::PairSet;
use super::{PipelineError, Result};
use crate::config::RunConfig;
use crate::flow::{
    annealing_reflow_loss, distill_loss, fg_distill_loss, rf_loss, two_step_loss, AnnealBatch, AnnealSchedule,
    TimeSampler,
};
use crate::data::sample_noise_range;
use crate::io::LossRecord;
use crate::nn::{Bound, ConditionEncoder, FlowModel, VelocityModel};
use crate::rng::{derive, rng_at, standard_normals, Stream};
use crate::tensor::{AdamState, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRecord>,
}

/// Seed of the training randomness of one stage.
pub fn stage_seed(cfg: &RunConfig, stage: Stage) -> u64 {
    let salt = match stage {
        Stage::Teacher => 1,
        Stage::AnnealReflow => 2,
        Stage::Distill => 3,
    };
    derive(cfg.seeds.training, salt)
}

pub fn init_teacher(cfg: &RunConfig) -> Result<FlowModel> {
    let velocity = VelocityModel::new(cfg.teacher_velocity(), derive(cfg.seeds.model, 1))?;
    let encoder = cfg
        .encoder()
        .map(|e| ConditionEncoder::new(e, derive(cfg.seeds.model, 2)))
        .transpose()?;
    Ok(FlowModel { velocity, encoder })
}

/// Learning rate of iteration `k` out of `total`: constant for the first half,
/// then halved at `halvings` evenly spaced points.
pub fn learning_rate_at(base: f64, halvings: u32, k: u64, total: u64) -> f64 {
    let half = total / 2;
    if halvings == 0 || k < half {
        return base;
    }
    let span = (total - half).max(1);
    let j = 1 + ((k - half) * halvings as u64 / span).min(halvings as u64 - 1);
    base * 0.5_f64.powi(j as i32)
}

/// Fails unless `resume` was written under `cfg` (output paths aside).
fn resumable(cfg: &RunConfig, resume: &Checkpoint, stage: Stage) -> Result<()> {
    resume.expect_stage(stage)?;
    let mask = |c: &RunConfig| {
        let mut c = c.clone();
        c.output_dir = Default::default();
        c
    };
    if mask(cfg) != mask(&resume.config) {
        return Err(PipelineError::Config(
            "resume checkpoint was written under a different configuration".into(),
        ));
    }
    Ok(())
}

fn batch_indices(seed: u64, k: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = rng_at(seed, Stream::Batch, k);
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

fn fresh_noise(seed: u64, k: u64, rows: usize, dim: usize) -> Result<Tensor> {
    let mut rng = rng_at(seed, Stream::FreshNoise, k);
    Ok(Tensor::new(vec![rows, dim], standard_normals(&mut rng, rows * dim))?)
}

/// Condition of a frozen encoder, recorded as a constant.
fn frozen_condition(tape: &mut Tape, model: &FlowModel, tokens: Option<&[Vec<usize>]>) -> Result<Option<Var>> {
    Ok(model.condition(tokens)?.map(|c| tape.constant(c)))
}

type StepFn<'a> = dyn FnMut(&mut Tape, &FlowModel, &Bound, Option<&Bound>, u64) -> Result<(Var, Option<f64>)> + 'a;

fn is_numeric(e: &PipelineError) -> bool {
    matches!(e, PipelineError::Tensor(TensorError::NumericFault { .. }))
}

/// Length and learning-rate schedule of one stage.
#[derive(Debug, Clone, Copy)]
struct Schedule {
    iterations: u64,
    learning_rate: f64,
    halvings: u32,
    /// Stop early (resumable) at this iteration.
    stop_at: Option<u64>,
}

/// Runs Adam steps from `ck.iteration` up to the end of the schedule.
fn train_loop(mut ck: Checkpoint, plan: Schedule, train_encoder: bool, step: &mut StepFn<'_>) -> Result<StageOutput> {
    let clock = Instant::now();
    let end = plan.stop_at.map_or(plan.iterations, |s| s.min(plan.iterations));
    let mut losses = Vec::with_capacity(end.saturating_sub(ck.iteration) as usize);
    while ck.iteration < end {
        let k = ck.iteration;
        ck.optimizer.learning_rate = learning_rate_at(plan.learning_rate, plan.halvings, k, plan.iterations);
        let diverged = |ck: Checkpoint| PipelineError::Diverged {
            stage: ck.stage,
            iteration: k,
            checkpoint: Box::new(ck),
        };
        let mut tape = Tape::new();
        let vb = ck.model.velocity.params().bind(&mut tape, true);
        let eb = match (&ck.model.encoder, train_encoder) {
            (Some(e), true) => Some(e.params().bind(&mut tape, true)),
            _ => None,
        };
        let (loss, beta) = match step(&mut tape, &ck.model, &vb, eb.as_ref(), k) {
            Ok(v) => v,
            Err(e) if is_numeric(&e) => return Err(diverged(ck)),
            Err(e) => return Err(e),
        };
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(diverged(ck));
        }
        let grads = match tape.backward(loss) {
            Ok(g) => g,
            Err(TensorError::NumericFault { .. }) => return Err(diverged(ck)),
            Err(e) => return Err(e.into()),
        };
        ck.model.velocity.params_mut().store_grads(&vb, &grads)?;
        if let (Some(enc), Some(eb)) = (ck.model.encoder.as_mut(), eb.as_ref()) {
            enc.params_mut().store_grads(eb, &grads)?;
        }
        let FlowModel { velocity, encoder } = &mut ck.model;
        let mut params = velocity.params_mut().tensors_mut();
        if train_encoder {
            if let Some(enc) = encoder.as_mut() {
                params.extend(enc.params_mut().tensors_mut());
            }
        }
        ck.optimizer.step(&mut params)?;
        ck.model.velocity.params_mut().zero_grads();
        if let Some(enc) = ck.model.encoder.as_mut() {
            enc.params_mut().zero_grads();
        }
        ck.iteration += 1;
        losses.push(LossRecord {
            iteration: k,
            loss: value,
            beta,
            wall_time: clock.elapsed().as_secs_f64(),
        });
    }
    Ok(StageOutput { checkpoint: ck, losses })
}

/// Rectified-flow training on independent (data, noise) couplings. The
/// condition encoder, if any, trains jointly.
///
/// `stop_at` ends the stage early at that iteration; resuming the returned
/// checkpoint continues the same schedule.
pub fn train_teacher(cfg: &RunConfig, resume: Option<Checkpoint>, stop_at: Option<u64>) -> Result<StageOutput> {
    cfg.validate()?;
    let ck = match resume {
        Some(ck) => {
            resumable(cfg, &ck, Stage::Teacher)?;
            ck
        }
        None => Checkpoint {
            stage: Stage::Teacher,
            iteration: 0,
            model: init_teacher(cfg)?,
            optimizer: AdamState::new(cfg.stages.teacher.learning_rate),
            config: cfg.clone(),
        },
    };
    let ck = Checkpoint { config: cfg.clone(), ..ck };
    let seed = stage_seed(cfg, Stage::Teacher);
    let b = cfg.stages.teacher.batch_size;
    let dist = cfg.dataset.clone();
    let data_seed = cfg.seeds.data;
    let times = TimeSampler::new(seed);
    let mut step = |tape: &mut Tape, model: &FlowModel, vb: &Bound, eb: Option<&Bound>, k: u64| {
        let batch = dist.sample_range(data_seed, k * b as u64, b)?;
        let x1 = sample_noise_range(b, dist.dim(), seed, k * b as u64);
        let t = times.sample(b, k);
        let c = match (&model.encoder, eb, batch.tokens.as_deref()) {
            (Some(enc), Some(eb), Some(tokens)) => Some(enc.forward(tape, eb, tokens)?),
            _ => None,
        };
        Ok((rf_loss(tape, &model.velocity, vb, &batch.x, &x1, c, &t)?, None))
    };
    let plan = Schedule {
        iterations: cfg.stages.teacher.iterations,
        learning_rate: cfg.stages.teacher.learning_rate,
        halvings: cfg.stages.teacher.lr_halvings,
        stop_at,
    };
    train_loop(ck, plan, true, &mut step)
}

/// Annealing reflow of a narrow student on teacher couplings. The teacher's
/// condition encoder is copied and frozen.
pub fn train_anneal_reflow(
    cfg: &RunConfig,
    teacher: &Checkpoint,
    pairs: &PairSet,
    resume: Option<Checkpoint>,
    stop_at: Option<u64>,
) -> Result<StageOutput> {
    cfg.validate()?;
    teacher.expect_stage(Stage::Teacher)?;
    pairs.check_source(&teacher.model.fingerprint())?;
    if pairs.is_empty() {
        return Err(PipelineError::Missing("a non-empty pair set".into()));
    }
    let ck = match resume {
        Some(ck) => {
            resumable(cfg, &ck, Stage::AnnealReflow)?;
            ck
        }
        None => Checkpoint {
            stage: Stage::AnnealReflow,
            iteration: 0,
            model: FlowModel {
                velocity: VelocityModel::new(cfg.student_velocity(), derive(cfg.seeds.model, 3))?,
                encoder: teacher.model.encoder.clone(),
            },
            optimizer: AdamState::new(cfg.stages.anneal.learning_rate),
            config: cfg.clone(),
        },
    };
    let ck = Checkpoint { config: cfg.clone(), ..ck };
    let seed = stage_seed(cfg, Stage::AnnealReflow);
    let b = cfg.stages.anneal.batch_size;
    let sched = AnnealSchedule::new(cfg.stages.anneal.k_a_step);
    let times = TimeSampler::new(seed);
    let mut step = |tape: &mut Tape, model: &FlowModel, vb: &Bound, _: Option<&Bound>, k: u64| {
        let idx = batch_indices(seed, k, pairs.len(), b);
        let (x1, x0_hat, tokens) = pairs.rows(&idx);
        let x1_prime = fresh_noise(seed, k, b, pairs.dim)?;
        let t = times.sample(b, k);
        let c = frozen_condition(tape, model, tokens.as_deref())?;
        let batch = AnnealBatch {
            x1: &x1,
            x0_hat: &x0_hat,
            x1_prime: &x1_prime,
            t: &t,
            k,
        };
        Ok((annealing_reflow_loss(tape, &model.velocity, vb, batch, c, sched)?, Some(sched.beta(k))))
    };
    let plan = Schedule {
        iterations: cfg.stages.anneal.iterations,
        learning_rate: cfg.stages.anneal.learning_rate,
        halvings: cfg.stages.anneal.lr_halvings,
        stop_at,
    };
    train_loop(ck, plan, false, &mut step)
}

/// Flow-guided distillation of the annealed student into a one-step
/// generator, starting from the student's own weights.
///
/// The one-step term regresses onto stored pairs regenerated from the
/// student; the two-step term uses fresh noise each iteration, with the
/// student frozen as its guide.
pub fn train_distill(
    cfg: &RunConfig,
    annealed: &Checkpoint,
    pairs: &PairSet,
    resume: Option<Checkpoint>,
    stop_at: Option<u64>,
) -> Result<StageOutput> {
    cfg.validate()?;
    annealed.expect_stage(Stage::AnnealReflow)?;
    pairs.check_source(&annealed.model.fingerprint())?;
    if pairs.is_empty() {
        return Err(PipelineError::Missing("a non-empty pair set".into()));
    }
    let ck = match resume {
        Some(ck) => {
            resumable(cfg, &ck, Stage::Distill)?;
            ck
        }
        None => Checkpoint {
            stage: Stage::Distill,
            iteration: 0,
            model: annealed.model.clone(),
            optimizer: AdamState::new(cfg.stages.distill.learning_rate),
            config: cfg.clone(),
        },
    };
    let ck = Checkpoint { config: cfg.clone(), ..ck };
    let seed = stage_seed(cfg, Stage::Distill);
    let settings = cfg.stages.distill.clone();
    let b = settings.batch_size;
    let guide = &annealed.model.velocity;
    let dist = &cfg.dataset;
    let times = TimeSampler::new(seed);
    let mut step = |tape: &mut Tape, model: &FlowModel, vb: &Bound, _: Option<&Bound>, k: u64| {
        let mut terms = Vec::with_capacity(2);
        if settings.distill_term {
            let idx = batch_indices(seed, k, pairs.len(), b);
            let (x1, x0_hat, tokens) = pairs.rows(&idx);
            let c = frozen_condition(tape, model, tokens.as_deref())?;
            terms.push(distill_loss(tape, &model.velocity, vb, &x1, &x0_hat, c)?);
        }
        if settings.two_step {
            let x1 = fresh_noise(seed, k, b, pairs.dim)?;
            let tokens: Option<Vec<Vec<usize>>> = dist
                .is_conditional()
                .then(|| (0..b as u64).map(|i| dist.condition_at(seed, k * b as u64 + i).expect("conditional")).collect());
            let t = times.sample(b, k);
            let c = frozen_condition(tape, model, tokens.as_deref())?;
            terms.push(two_step_loss(tape, guide, &model.velocity, vb, &x1, c, &t)?);
        }
        let loss = match terms[..] {
            [a, b] => fg_distill_loss(tape, a, b)?,
            [a] => a,
            _ => return Err(PipelineError::Config("distillation has no active loss term".into())),
        };
        Ok((loss, None))
    };
    let plan = Schedule {
        iterations: settings.iterations,
        learning_rate: settings.learning_rate,
        halvings: settings.lr_halvings,
        stop_at,
    };
    train_loop(ck, plan, false, &mut step)
}
