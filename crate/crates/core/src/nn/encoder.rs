use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dsconv::DepthwiseSeparableConv1d;
use super::layers::Linear;
use super::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub embed_dim: usize,
    pub channels: usize,
    pub layers: usize,
    pub kernel_size: usize,
    pub condition_dim: usize,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize, seq_len: usize) -> Self {
        Self {
            vocab_size,
            seq_len,
            embed_dim: 8,
            channels: 16,
            layers: 2,
            kernel_size: 3,
            condition_dim: 8,
        }
    }

    fn conv_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embed_dim
        } else {
            self.channels
        }
    }

    pub fn parameter_count(&self) -> usize {
        let convs: usize = (0..self.layers)
            .map(|l| DepthwiseSeparableConv1d::weight_count(self.conv_in(l), self.channels, self.kernel_size) + self.channels)
            .sum();
        self.vocab_size * self.embed_dim
            + convs
            + Linear::parameter_count(self.seq_len * self.channels, self.condition_dim, true)
    }

    /// Same encoder with dense convolutions in place of depthwise-separable ones.
    pub fn dense_parameter_count(&self) -> usize {
        let convs: usize = (0..self.layers)
            .map(|l| DepthwiseSeparableConv1d::dense_weight_count(self.conv_in(l), self.channels, self.kernel_size) + self.channels)
            .sum();
        self.vocab_size * self.embed_dim
            + convs
            + Linear::parameter_count(self.seq_len * self.channels, self.condition_dim, true)
    }
}

/// Token sequence → fixed-length condition vector.
///
/// Embedding lookup, a stack of depthwise-separable convolutions with tanh,
/// then a linear map of the flattened sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEncoder {
    cfg: EncoderConfig,
    store: ParamStore,
    table: ParamId,
    convs: Vec<DepthwiseSeparableConv1d>,
    head: Linear,
}

impl ConditionEncoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        if cfg.vocab_size == 0 || cfg.seq_len == 0 || cfg.condition_dim == 0 {
            return Err(TensorError::Contract(
                "encoder needs positive vocab_size, seq_len and condition_dim".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let table = store.add_init("embed", &[cfg.vocab_size, cfg.embed_dim], Init::Normal(1.0), &mut rng);
        let convs = (0..cfg.layers)
            .map(|l| {
                DepthwiseSeparableConv1d::new(
                    &mut store,
                    &format!("conv{l}"),
                    cfg.conv_in(l),
                    cfg.channels,
                    cfg.kernel_size,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let flat = cfg.seq_len * if cfg.layers == 0 { cfg.embed_dim } else { cfg.channels };
        let head = Linear::new(&mut store, "head", flat, cfg.condition_dim, true, false, &mut rng);
        Ok(Self {
            cfg,
            store,
            table,
            convs,
            head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.numel()
    }

    fn validate(&self, tokens: &[Vec<usize>]) -> Result<Vec<usize>> {
        let mut flat = Vec::with_capacity(tokens.len() * self.cfg.seq_len);
        for seq in tokens {
            if seq.len() != self.cfg.seq_len {
                return Err(TensorError::Contract(format!(
                    "token sequence of length {} (expected {})",
                    seq.len(),
                    self.cfg.seq_len
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= self.cfg.vocab_size) {
                return Err(TensorError::Contract(format!(
                    "token {bad} outside vocabulary of {}",
                    self.cfg.vocab_size
                )));
            }
            flat.extend_from_slice(seq);
        }
        Ok(flat)
    }

    /// `[batch × condition_dim]` for a batch of token sequences.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, tokens: &[Vec<usize>]) -> Result<Var> {
        let flat = self.validate(tokens)?;
        let batch = tokens.len();
        let len = self.cfg.seq_len;
        let e = tape.gather_rows(bound.get(self.table), &flat)?;
        let mut h = tape.reshape(e, &[batch, len, self.cfg.embed_dim])?;
        for conv in &self.convs {
            h = conv.forward(tape, bound, h)?;
            h = tape.tanh(h)?;
        }
        let width = tape.shape(h)[2];
        let h = tape.reshape(h, &[batch, len * width])?;
        self.head.forward(tape, bound, h)
    }

    pub fn encode(&self, tokens: &[Vec<usize>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let c = self.forward(&mut tape, &bound, tokens)?;
        Ok(tape.tensor(c))
    }
}
