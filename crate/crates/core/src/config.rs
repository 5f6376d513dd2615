//! Strict JSON run configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::Distribution;
use crate::nn::{EncoderConfig, VelocityConfig};
use crate::solvers::SolverConfig;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{key}: {message}")]
pub struct ConfigError {
    /// Dotted path of the offending key, `.` for the document root.
    pub key: String,
    pub message: String,
    pub line: Option<usize>,
    pub column: Option<usize>,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
            line: None,
            column: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSettings {
    pub embed_dim: usize,
    pub channels: usize,
    pub layers: usize,
    pub kernel_size: usize,
    pub condition_dim: usize,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        let e = EncoderConfig::new(1, 1);
        Self {
            embed_dim: e.embed_dim,
            channels: e.channels,
            layers: e.layers,
            kernel_size: e.kernel_size,
            condition_dim: e.condition_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub teacher_width: usize,
    pub student_width: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub time_max_period: f64,
    pub time_scale: f64,
    pub encoder: EncoderSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            teacher_width: 64,
            student_width: 24,
            depth: 4,
            time_dim: 16,
            time_max_period: 100.0,
            time_scale: 10.0,
            encoder: EncoderSettings::default(),
        }
    }
}

/// Per-stage optimizer settings. The learning rate is constant for the first
/// half of a stage; the second half is split into `lr_halvings` equal spans,
/// each at half the rate of the one before.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherStage {
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_halvings: u32,
}

impl Default for TeacherStage {
    fn default() -> Self {
        Self {
            iterations: 4000,
            batch_size: 256,
            learning_rate: 1e-3,
            lr_halvings: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairStage {
    pub count: usize,
}

impl Default for PairStage {
    fn default() -> Self {
        Self { count: 50_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealStage {
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_halvings: u32,
    /// Iterations over which the noise mixing weight falls from 1 to 0.
    pub k_a_step: u64,
}

impl Default for AnnealStage {
    fn default() -> Self {
        Self {
            iterations: 4000,
            batch_size: 256,
            learning_rate: 5e-4,
            lr_halvings: 4,
            k_a_step: 3000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillStage {
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_halvings: u32,
    /// Include the two-step regularizer.
    pub two_step: bool,
    /// Include the one-step regression onto stored pairs.
    pub distill_term: bool,
}

impl Default for DistillStage {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 256,
            learning_rate: 2.5e-4,
            lr_halvings: 4,
            two_step: true,
            distill_term: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct StagesConfig {
    pub teacher: TeacherStage,
    pub pairs: PairStage,
    pub anneal: AnnealStage,
    pub distill: DistillStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub samples: usize,
    pub projections: usize,
    pub probe_steps: usize,
    pub probe_samples: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            samples: 20_000,
            projections: 64,
            probe_steps: 32,
            probe_samples: 2_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub training: u64,
    pub pairs: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 11,
            model: 23,
            training: 37,
            pairs: 41,
            eval: 53,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Distribution,
    pub model: ModelConfig,
    pub stages: StagesConfig,
    /// Solver used to generate training pairs.
    pub solver: SolverConfig,
    pub metrics: MetricsConfig,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: Distribution::mixture_ring(),
            model: ModelConfig::default(),
            stages: StagesConfig::default(),
            solver: SolverConfig::default(),
            metrics: MetricsConfig::default(),
            seeds: Seeds::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::new(key, format!("must be positive, got {v}")))
    }
}

fn nonzero(key: &str, v: usize) -> Result<(), ConfigError> {
    if v > 0 {
        Ok(())
    } else {
        Err(ConfigError::new(key, "must be at least 1"))
    }
}

impl RunConfig {
    /// Parses and validates; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            ConfigError {
                key: path,
                message: inner.to_string(),
                line: Some(inner.line()),
                column: Some(inner.column()),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Digest of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..16])
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.dataset
            .validate()
            .map_err(|e| ConfigError::new("dataset", e.to_string()))?;
        let m = &self.model;
        nonzero("model.teacher_width", m.teacher_width)?;
        nonzero("model.student_width", m.student_width)?;
        nonzero("model.depth", m.depth)?;
        if m.student_width >= m.teacher_width {
            return Err(ConfigError::new(
                "model.student_width",
                format!("must be below teacher_width ({})", m.teacher_width),
            ));
        }
        if m.time_dim == 0 || !m.time_dim.is_multiple_of(2) {
            return Err(ConfigError::new("model.time_dim", "must be even and positive"));
        }
        positive("model.time_max_period", m.time_max_period)?;
        positive("model.time_scale", m.time_scale)?;
        let e = &m.encoder;
        nonzero("model.encoder.embed_dim", e.embed_dim)?;
        nonzero("model.encoder.channels", e.channels)?;
        nonzero("model.encoder.kernel_size", e.kernel_size)?;
        nonzero("model.encoder.condition_dim", e.condition_dim)?;

        let s = &self.stages;
        nonzero("stages.teacher.batch_size", s.teacher.batch_size)?;
        positive("stages.teacher.learning_rate", s.teacher.learning_rate)?;
        nonzero("stages.pairs.count", s.pairs.count)?;
        nonzero("stages.anneal.batch_size", s.anneal.batch_size)?;
        positive("stages.anneal.learning_rate", s.anneal.learning_rate)?;
        if s.anneal.k_a_step > s.anneal.iterations {
            return Err(ConfigError::new(
                "stages.anneal.k_a_step",
                format!("must not exceed stages.anneal.iterations ({})", s.anneal.iterations),
            ));
        }
        nonzero("stages.distill.batch_size", s.distill.batch_size)?;
        positive("stages.distill.learning_rate", s.distill.learning_rate)?;
        if s.distill.iterations > 0 && !s.distill.two_step && !s.distill.distill_term {
            return Err(ConfigError::new(
                "stages.distill",
                "two_step and distill_term cannot both be disabled",
            ));
        }
        self.solver
            .validate()
            .map_err(|e| ConfigError::new("solver", e.to_string()))?;
        let mc = &self.metrics;
        if mc.samples <= self.dataset.dim() {
            return Err(ConfigError::new("metrics.samples", "must exceed the data dimension"));
        }
        if mc.projections < 16 {
            return Err(ConfigError::new("metrics.projections", "must be at least 16"));
        }
        if mc.probe_steps < 8 {
            return Err(ConfigError::new("metrics.probe_steps", "must be at least 8"));
        }
        nonzero("metrics.probe_samples", mc.probe_samples)?;
        Ok(())
    }

    fn velocity(&self, width: usize) -> VelocityConfig {
        let m = &self.model;
        let cond = if self.dataset.is_conditional() {
            m.encoder.condition_dim
        } else {
            0
        };
        VelocityConfig {
            data_dim: self.dataset.dim(),
            width,
            depth: m.depth,
            time_dim: m.time_dim,
            time_max_period: m.time_max_period,
            time_scale: m.time_scale,
            condition_dim: cond,
        }
    }

    pub fn teacher_velocity(&self) -> VelocityConfig {
        self.velocity(self.model.teacher_width)
    }

    pub fn student_velocity(&self) -> VelocityConfig {
        self.velocity(self.model.student_width)
    }

    pub fn encoder(&self) -> Option<EncoderConfig> {
        let (vocab, len) = self.dataset.token_layout()?;
        let e = &self.model.encoder;
        Some(EncoderConfig {
            vocab_size: vocab,
            seq_len: len,
            embed_dim: e.embed_dim,
            channels: e.channels,
            layers: e.layers,
            kernel_size: e.kernel_size,
            condition_dim: e.condition_dim,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_key_named() {
        let err = RunConfig::from_json(r#"{"model": {"teacher_widht": 8}}"#).unwrap_err();
        assert!(err.key.starts_with("model"), "{err}");
        assert!(err.message.contains("teacher_widht"));
    }

    #[test]
    fn negative_width_named() {
        let err = RunConfig::from_json(r#"{"model": {"teacher_width": -4}}"#).unwrap_err();
        assert_eq!(err.key, "model.teacher_width");
        assert_eq!(err.line, Some(1));
    }

    #[test]
    fn semantic_checks() {
        let err = RunConfig::from_json(r#"{"model": {"teacher_width": 16, "student_width": 16}}"#).unwrap_err();
        assert_eq!(err.key, "model.student_width");
        let err = RunConfig::from_json(r#"{"stages": {"anneal": {"iterations": 10, "k_a_step": 20}}}"#).unwrap_err();
        assert_eq!(err.key, "stages.anneal.k_a_step");
    }

    #[test]
    fn conditional_dims() {
        let cfg = RunConfig {
            dataset: Distribution::cond_seq(),
            ..RunConfig::default()
        };
        assert_eq!(cfg.teacher_velocity().condition_dim, 8);
        assert_eq!(cfg.encoder().unwrap().vocab_size, 4);
        assert_eq!(RunConfig::default().student_velocity().condition_dim, 0);
    }
}
