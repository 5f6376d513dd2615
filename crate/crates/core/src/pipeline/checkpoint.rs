use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container;
use super::{PipelineError, Result};
use crate::config::RunConfig;
use crate::io::{self, IoError};
use crate::nn::{ConditionEncoder, EncoderConfig, FlowModel, ParamStore, VelocityConfig, VelocityModel};
use crate::tensor::{AdamState, Tensor};

const MAGIC: &[u8; 8] = b"RFLOWCK\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Teacher,
    AnnealReflow,
    Distill,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Teacher => "teacher",
            Stage::AnnealReflow => "anneal_reflow",
            Stage::Distill => "distill",
        }
    }
}

/// Model, optimizer and position of a training stage.
///
/// All training randomness is a pure function of the configured seeds and
/// the iteration counter, so those two are the complete generator state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub iteration: u64,
    pub model: FlowModel,
    pub optimizer: AdamState,
    pub config: RunConfig,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stage: Stage,
    iteration: u64,
    config: RunConfig,
    config_hash: String,
    fingerprint: String,
    velocity: VelocityConfig,
    encoder: Option<EncoderConfig>,
    adam: AdamMeta,
    tensors: Vec<TensorEntry>,
}

fn push_store(group: &str, store: &ParamStore, entries: &mut Vec<TensorEntry>, payload: &mut Vec<f64>) {
    for (name, t) in store.iter() {
        entries.push(TensorEntry {
            group: group.into(),
            name: name.into(),
            shape: t.shape().to_vec(),
        });
        payload.extend_from_slice(t.data());
    }
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        push_store("velocity", self.model.velocity.params(), &mut tensors, &mut payload);
        if let Some(enc) = &self.model.encoder {
            push_store("encoder", enc.params(), &mut tensors, &mut payload);
        }
        let (first, second) = self.optimizer.moments();
        for (group, buffers) in [("adam.first", first), ("adam.second", second)] {
            for (i, b) in buffers.iter().enumerate() {
                tensors.push(TensorEntry {
                    group: group.into(),
                    name: i.to_string(),
                    shape: vec![b.len()],
                });
                payload.extend_from_slice(b);
            }
        }
        let header = Header {
            stage: self.stage,
            iteration: self.iteration,
            config: self.config.clone(),
            config_hash: self.config_hash(),
            fingerprint: self.model.fingerprint(),
            velocity: self.model.velocity.config().clone(),
            encoder: self.model.encoder.as_ref().map(|e| e.config().clone()),
            adam: AdamMeta {
                learning_rate: self.optimizer.learning_rate,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                epsilon: self.optimizer.epsilon,
                step: self.optimizer.step_count(),
            },
            tensors,
        };
        container::encode(MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let (h, payload): (Header, Vec<f64>) = container::decode(MAGIC, bytes)?;
        let mut velocity = VelocityModel::new(h.velocity.clone(), 0).map_err(|e| e.to_string())?;
        let mut encoder = match &h.encoder {
            Some(cfg) => Some(ConditionEncoder::new(cfg.clone(), 0).map_err(|e| e.to_string())?),
            None => None,
        };
        let mut first = Vec::new();
        let mut second = Vec::new();
        let mut offset = 0;
        let mut restored = (0, 0);
        for entry in &h.tensors {
            let len: usize = entry.shape.iter().product();
            let values = payload
                .get(offset..offset + len)
                .ok_or("payload shorter than the tensor directory")?
                .to_vec();
            offset += len;
            match entry.group.as_str() {
                "velocity" => {
                    let t = Tensor::new(entry.shape.clone(), values).map_err(|e| e.to_string())?;
                    velocity.params_mut().set(&entry.name, t).map_err(|e| e.to_string())?;
                    restored.0 += 1;
                }
                "encoder" => {
                    let enc = encoder.as_mut().ok_or("encoder tensors without an encoder config")?;
                    let t = Tensor::new(entry.shape.clone(), values).map_err(|e| e.to_string())?;
                    enc.params_mut().set(&entry.name, t).map_err(|e| e.to_string())?;
                    restored.1 += 1;
                }
                "adam.first" => first.push(values),
                "adam.second" => second.push(values),
                other => return Err(format!("unknown tensor group {other}")),
            }
        }
        if offset != payload.len() {
            return Err("payload longer than the tensor directory".into());
        }
        if restored.0 != velocity.params().len() || restored.1 != encoder.as_ref().map_or(0, |e| e.params().len()) {
            return Err("checkpoint does not cover every parameter".into());
        }
        let mut optimizer =
            AdamState::restore(h.adam.learning_rate, h.adam.step, first, second).map_err(|e| e.to_string())?;
        optimizer.beta1 = h.adam.beta1;
        optimizer.beta2 = h.adam.beta2;
        optimizer.epsilon = h.adam.epsilon;
        let ck = Self {
            stage: h.stage,
            iteration: h.iteration,
            model: FlowModel { velocity, encoder },
            optimizer,
            config: h.config,
        };
        if ck.model.fingerprint() != h.fingerprint {
            return Err("parameter fingerprint does not match the header".into());
        }
        if ck.config_hash() != h.config_hash {
            return Err("config hash does not match the header".into());
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::atomic_write(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(PipelineError::Missing(format!("checkpoint {}", path.display())));
        }
        let bytes = io::read(path)?;
        Self::from_bytes(&bytes).map_err(|m| IoError::format(path, m).into())
    }

    /// Fails unless this checkpoint comes from `stage`.
    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage == stage {
            Ok(())
        } else {
            Err(PipelineError::Missing(format!(
                "a {} checkpoint (got a {} checkpoint)",
                stage.name(),
                self.stage.name()
            )))
        }
    }
}
