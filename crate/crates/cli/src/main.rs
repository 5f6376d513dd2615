use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rflow::config::RunConfig;
use rflow::io::{write_loss_csv, write_trajectories_csv, SampleTable};
use rflow::pipeline::{
    evaluate_model, evaluate_samples, generate_pairs, reference_samples, integrate, pair_seed, prior_draws, train_anneal_reflow,
    train_distill, train_teacher, Checkpoint, EvalOptions, PairSet, PipelineError, Stage, StageOutput,
};
use rflow::solvers::SolverConfig;

mod exit {
    pub const CONFIG: u8 = 2;
    pub const DIVERGED: u8 = 3;
    pub const MISSING: u8 = 4;
    pub const OTHER: u8 = 1;
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: exit::CONFIG,
            message: message.into(),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Config(_) | PipelineError::InvalidConfig(_) => exit::CONFIG,
            PipelineError::Diverged { .. } => exit::DIVERGED,
            PipelineError::Missing(_) | PipelineError::FingerprintMismatch { .. } => exit::MISSING,
            _ => exit::OTHER,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<rflow::io::IoError> for Failure {
    fn from(e: rflow::io::IoError) -> Self {
        PipelineError::from(e).into()
    }
}

type Outcome = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "rflow", version, about = "Rectified-flow teacher, reflow student and one-step distillation on toy data")]
struct Cli {
    /// Worker threads for generation and evaluation. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SolverArg {
    Euler,
    Rk45,
}

#[derive(Args, Clone)]
struct SolverFlags {
    #[arg(long, value_enum, default_value_t = SolverArg::Rk45)]
    solver: SolverArg,
    /// Euler steps (euler only; default 1).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    atol: Option<f64>,
    #[arg(long)]
    max_nfe: Option<usize>,
}

impl SolverFlags {
    fn resolve(&self) -> Result<SolverConfig, Failure> {
        let cfg = match self.solver {
            SolverArg::Euler => {
                if self.rtol.is_some() || self.atol.is_some() {
                    return Err(Failure::usage("--rtol/--atol only apply to --solver rk45"));
                }
                SolverConfig::euler(self.steps.unwrap_or(1))
            }
            SolverArg::Rk45 => {
                if self.steps.is_some() {
                    return Err(Failure::usage("--steps only applies to --solver euler"));
                }
                SolverConfig::rk45(self.rtol.unwrap_or(1e-5), self.atol.unwrap_or(1e-5))
            }
        };
        let cfg = match self.max_nfe {
            Some(m) => SolverConfig { max_nfe: m, ..cfg },
            None => cfg,
        };
        cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PairSource {
    /// Couplings for annealing reflow.
    Teacher,
    /// Regenerated couplings for distillation.
    Student,
}

#[derive(Subcommand)]
enum Command {
    /// Train the wide rectified-flow teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Continue from a teacher checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop early at this iteration, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Integrate fresh noise through a trained model and store the couplings.
    GenPairs {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = PairSource::Teacher)]
        from: PairSource,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        rtol: Option<f64>,
        #[arg(long)]
        atol: Option<f64>,
    },
    /// Train the narrow student with annealing reflow on teacher couplings.
    AnnealReflow {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        k_a_step: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Distill the annealed student into a one-step generator.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<u64>,
        /// Drop the two-step regularizer.
        #[arg(long)]
        no_two_step: bool,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Generate samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        solver: SolverFlags,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write `(sample_id, t, x…)` trajectory knots here.
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Compare samples (CSV) or a checkpoint's generations with fresh data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        samples: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reference samples (CSV); defaults to fresh draws from the configured dataset.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverFlags,
        /// Report path; defaults to `<output_dir>/metrics.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write samples of the configured dataset as CSV.
    ExportData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            RunConfig::from_json(&text).map_err(|e| {
                let at = match (e.line, e.column) {
                    (Some(l), Some(c)) => format!(" (line {l}, column {c})"),
                    _ => String::new(),
                };
                Failure::usage(format!("{}: invalid config at {}{at}: {}", path.display(), e.key, e.message))
            })?
        }
        None => RunConfig::default(),
    };
    if let Some(dir) = &common.out_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn finish_config(cfg: &RunConfig) -> Result<(), Failure> {
    cfg.validate()
        .map_err(|e| Failure::usage(format!("invalid config at {}: {}", e.key, e.message)))?;
    rflow::io::atomic_write(&cfg.output_dir.join("config.resolved.json"), cfg.to_json().as_bytes())?;
    Ok(())
}

fn artifact(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

const TEACHER: &str = "teacher.ckpt";
const STUDENT: &str = "student.ckpt";
const DISTILLED: &str = "distilled.ckpt";
const TEACHER_PAIRS: &str = "pairs_teacher.bin";
const STUDENT_PAIRS: &str = "pairs_student.bin";

fn require(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Missing(path.display().to_string()).into())
    }
}

/// Saves a stage's outputs, or the last good state on divergence.
fn persist(
    result: Result<StageOutput, PipelineError>,
    cfg: &RunConfig,
    ckpt_name: &str,
    loss_name: &str,
) -> Outcome {
    match result {
        Ok(out) => {
            out.checkpoint.save(&artifact(cfg, ckpt_name))?;
            write_loss_csv(&artifact(cfg, loss_name), &out.losses)?;
            if let Some(last) = out.losses.last() {
                println!("{} iterations, final loss {:.6}", out.checkpoint.iteration, last.loss);
            } else {
                println!("{} iterations", out.checkpoint.iteration);
            }
            println!("wrote {}", artifact(cfg, ckpt_name).display());
            Ok(())
        }
        Err(PipelineError::Diverged {
            stage,
            iteration,
            checkpoint,
        }) => {
            let path = artifact(cfg, &format!("{}_diverged.ckpt", stage.name()));
            checkpoint.save(&path)?;
            Err(Failure {
                code: exit::DIVERGED,
                message: format!(
                    "{} training diverged at iteration {iteration}; last good state in {}",
                    stage.name(),
                    path.display()
                ),
            })
        }
        Err(e) => Err(e.into()),
    }
}

fn resume_from(path: &Option<PathBuf>) -> Result<Option<Checkpoint>, Failure> {
    path.as_deref().map(Checkpoint::load).transpose().map_err(Failure::from)
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::TrainTeacher {
            common,
            iterations,
            learning_rate,
            batch_size,
            resume,
            stop_after,
        } => {
            let mut cfg = load_config(&common)?;
            let s = &mut cfg.stages.teacher;
            s.iterations = iterations.unwrap_or(s.iterations);
            s.learning_rate = learning_rate.unwrap_or(s.learning_rate);
            s.batch_size = batch_size.unwrap_or(s.batch_size);
            finish_config(&cfg)?;
            let resume = resume_from(&resume)?;
            persist(train_teacher(&cfg, resume, stop_after), &cfg, TEACHER, "teacher_loss.csv")
        }
        Command::GenPairs {
            common,
            from,
            count,
            rtol,
            atol,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.stages.pairs.count = count.unwrap_or(cfg.stages.pairs.count);
            cfg.solver.rtol = rtol.unwrap_or(cfg.solver.rtol);
            cfg.solver.atol = atol.unwrap_or(cfg.solver.atol);
            finish_config(&cfg)?;
            let (ckpt, stage, out) = match from {
                PairSource::Teacher => (TEACHER, Stage::Teacher, TEACHER_PAIRS),
                PairSource::Student => (STUDENT, Stage::AnnealReflow, STUDENT_PAIRS),
            };
            let path = artifact(&cfg, ckpt);
            require(&path)?;
            let source = Checkpoint::load(&path)?;
            source.expect_stage(stage)?;
            let pairs = generate_pairs(&source, cfg.stages.pairs.count, &cfg.solver, pair_seed(&cfg, stage))?;
            pairs.save(&artifact(&cfg, out))?;
            println!(
                "{} pairs ({} skipped) from model {}",
                pairs.len(),
                pairs.skipped,
                pairs.fingerprint
            );
            println!("wrote {}", artifact(&cfg, out).display());
            Ok(())
        }
        Command::AnnealReflow {
            common,
            iterations,
            k_a_step,
            resume,
            stop_after,
        } => {
            let mut cfg = load_config(&common)?;
            let s = &mut cfg.stages.anneal;
            s.iterations = iterations.unwrap_or(s.iterations);
            s.k_a_step = k_a_step.unwrap_or(s.k_a_step);
            finish_config(&cfg)?;
            require(&artifact(&cfg, TEACHER))?;
            require(&artifact(&cfg, TEACHER_PAIRS))?;
            let teacher = Checkpoint::load(&artifact(&cfg, TEACHER))?;
            let pairs = PairSet::load(&artifact(&cfg, TEACHER_PAIRS), Some(&teacher.model.fingerprint()))?;
            let resume = resume_from(&resume)?;
            persist(
                train_anneal_reflow(&cfg, &teacher, &pairs, resume, stop_after),
                &cfg,
                STUDENT,
                "anneal_loss.csv",
            )
        }
        Command::Distill {
            common,
            iterations,
            no_two_step,
            resume,
            stop_after,
        } => {
            let mut cfg = load_config(&common)?;
            let s = &mut cfg.stages.distill;
            s.iterations = iterations.unwrap_or(s.iterations);
            if no_two_step {
                s.two_step = false;
            }
            finish_config(&cfg)?;
            require(&artifact(&cfg, STUDENT))?;
            require(&artifact(&cfg, STUDENT_PAIRS))?;
            let student = Checkpoint::load(&artifact(&cfg, STUDENT))?;
            let pairs = PairSet::load(&artifact(&cfg, STUDENT_PAIRS), Some(&student.model.fingerprint()))?;
            let resume = resume_from(&resume)?;
            persist(train_distill(&cfg, &student, &pairs, resume, stop_after), &cfg, DISTILLED, "distill_loss.csv")
        }
        Command::Sample {
            checkpoint,
            solver,
            n,
            seed,
            out,
            trajectories,
        } => {
            let mut solver = solver.resolve()?;
            solver.record_trajectory = trajectories.is_some();
            if n == 0 {
                return Err(Failure::usage("--n must be at least 1"));
            }
            require(&checkpoint)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let dist = &ck.config.dataset;
            let (x1, tokens) = prior_draws(dist, n, seed);
            let g = integrate(&ck.model, &x1, tokens.as_deref(), &solver, false).map_err(Failure::from)?;
            let classes = tokens
                .as_ref()
                .map(|t| t.iter().map(|s| dist.class_of(s).expect("conditional")).collect());
            SampleTable {
                x: g.x0.clone(),
                classes,
                tokens: g.tokens.clone(),
            }
            .write_csv(&out)?;
            if let (Some(path), Some(tr)) = (&trajectories, &g.trajectories) {
                write_trajectories_csv(path, tr)?;
            }
            println!(
                "{n} samples, mean NFE {}, time per sample {:.3e} s",
                g.mean_nfe(),
                g.time_per_sample()
            );
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval {
            common,
            samples,
            checkpoint,
            reference,
            solver,
            out,
        } => {
            let cfg = load_config(&common)?;
            let solver = solver.resolve()?;
            finish_config(&cfg)?;
            let opts = EvalOptions::from_config(&cfg, solver);
            let reference = match &reference {
                Some(path) => {
                    require(path)?;
                    Some(SampleTable::read_csv(path)?.x)
                }
                None => None,
            };
            let report = match (samples, checkpoint) {
                (Some(path), _) => {
                    require(&path)?;
                    let table = SampleTable::read_csv(&path)?;
                    let reference = match reference {
                        Some(r) => r,
                        None => reference_samples(&cfg.dataset, opts.samples, opts.seed)?,
                    };
                    if table.x.cols() != reference.cols() {
                        return Err(Failure::usage(format!(
                            "samples have {} columns but the reference has dimension {}",
                            table.x.cols(),
                            reference.cols()
                        )));
                    }
                    evaluate_samples(&table.x, &reference, &opts)?
                }
                (None, Some(path)) => {
                    require(&path)?;
                    let ck = Checkpoint::load(&path)?;
                    if ck.model.data_dim() != cfg.dataset.dim() {
                        return Err(Failure::usage(format!(
                            "model dimension {} differs from reference dimension {}",
                            ck.model.data_dim(),
                            cfg.dataset.dim()
                        )));
                    }
                    if reference.is_some() {
                        return Err(Failure::usage("--reference only applies with --samples"));
                    }
                    evaluate_model(&ck.model, &cfg.dataset, &opts)?.0
                }
                (None, None) => return Err(Failure::usage("give --samples or --checkpoint")),
            };
            let path = out.unwrap_or_else(|| artifact(&cfg, "metrics.json"));
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            rflow::io::atomic_write(&path, json.as_bytes())?;
            println!("{} {:.6}", report.frechet_label, report.frechet_gauss);
            println!("sliced_wasserstein {:.6}", report.sliced_wasserstein);
            if let Some(s) = report.straightness {
                println!("straightness {s:.6}");
            }
            if let Some(nfe) = report.mean_nfe {
                println!("mean_nfe {nfe}");
            }
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::ExportData { common, n, out } => {
            let cfg = load_config(&common)?;
            finish_config(&cfg)?;
            let batch = cfg
                .dataset
                .sample(n, cfg.seeds.data)
                .map_err(|e| Failure::from(PipelineError::from(e)))?;
            SampleTable {
                x: batch.x,
                classes: batch.classes,
                tokens: batch.tokens,
            }
            .write_csv(&out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(exit::OTHER);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
