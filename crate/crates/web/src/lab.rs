use rflow::config::RunConfig;
use rflow::data::{sample_noise, Distribution};
use rflow::nn::FlowModel;
use rflow::pipeline::{generate_pairs, integrate, pair_seed, train_anneal_reflow, train_teacher, Checkpoint, Result, Stage};
use rflow::solvers::{straightness, SolverConfig};

/// Probe knots used for the straightness readout.
const PROBE_STEPS: usize = 16;

/// A small ring-of-Gaussians run that can be advanced a few iterations at a
/// time, so a page can redraw between chunks.
pub struct Lab {
    cfg: RunConfig,
    teacher: Checkpoint,
    student: Option<FlowModel>,
}

impl Lab {
    pub fn new(components: usize, seed: u64) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.dataset = Distribution::MixtureRing {
            components,
            radius: 4.0,
            sigma: 0.2,
        };
        cfg.model.teacher_width = 32;
        cfg.model.student_width = 16;
        cfg.model.depth = 2;
        cfg.stages.teacher.iterations = 3000;
        cfg.stages.teacher.batch_size = 128;
        cfg.stages.pairs.count = 2000;
        cfg.stages.anneal.iterations = 800;
        cfg.stages.anneal.batch_size = 128;
        cfg.stages.anneal.k_a_step = 600;
        cfg.solver = SolverConfig::rk45(1e-3, 1e-3);
        cfg.seeds.model += seed;
        cfg.seeds.training += seed;
        cfg.seeds.pairs += seed;
        let teacher = train_teacher(&cfg, None, Some(0))?.checkpoint;
        Ok(Self {
            cfg,
            teacher,
            student: None,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.teacher.iteration
    }

    pub fn total_iterations(&self) -> u64 {
        self.cfg.stages.teacher.iterations
    }

    /// Up to `steps` more teacher iterations; returns their mean loss, or
    /// `None` once the schedule is complete.
    pub fn train(&mut self, steps: u64) -> Result<Option<f64>> {
        let start = self.teacher.iteration;
        if start >= self.total_iterations() {
            return Ok(None);
        }
        let out = train_teacher(&self.cfg, Some(self.teacher.clone()), Some(start + steps))?;
        self.teacher = out.checkpoint;
        self.student = None;
        let fresh: Vec<f64> = out.losses.iter().filter(|r| r.iteration >= start).map(|r| r.loss).collect();
        Ok(Some(fresh.iter().sum::<f64>() / fresh.len().max(1) as f64))
    }

    fn model(&self, student: bool) -> Option<&FlowModel> {
        if student {
            self.student.as_ref()
        } else {
            Some(&self.teacher.model)
        }
    }

    /// Euler paths of `n` noise draws, flattened as `[sample][knot][x, y]`
    /// with `steps + 1` knots from noise to sample.
    pub fn paths(&self, n: usize, steps: usize, seed: u64, student: bool) -> Result<Vec<f64>> {
        let Some(model) = self.model(student) else {
            return Ok(Vec::new());
        };
        let x1 = sample_noise(n, 2, seed);
        let solver = SolverConfig::euler(steps).with_trajectory(true);
        let out = integrate(model, &x1, None, &solver, false)?;
        Ok(out
            .trajectories
            .unwrap_or_default()
            .into_iter()
            .flat_map(|tr| tr.into_iter().flat_map(|(_, x)| x))
            .collect())
    }

    /// Reflows the current teacher into the narrow student. Returns the
    /// straightness of teacher and student.
    pub fn straighten(&mut self) -> Result<(f64, f64)> {
        let pairs = generate_pairs(
            &self.teacher,
            self.cfg.stages.pairs.count,
            &self.cfg.solver,
            pair_seed(&self.cfg, Stage::Teacher),
        )?;
        let student = train_anneal_reflow(&self.cfg, &self.teacher, &pairs, None, None)?.checkpoint.model;
        let probe = sample_noise(500, 2, self.cfg.seeds.eval);
        let before = straightness(&self.teacher.model.velocity, &probe, None, PROBE_STEPS)?;
        let after = straightness(&student.velocity, &probe, None, PROBE_STEPS)?;
        self.student = Some(student);
        Ok((before, after))
    }

    pub fn has_student(&self) -> bool {
        self.student.is_some()
    }

    /// Draws from the target distribution, flattened `[x, y]`.
    pub fn data(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        Ok(self.cfg.dataset.sample(n, seed)?.x.data().to_vec())
    }
}
