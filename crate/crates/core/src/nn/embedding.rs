use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError};

/// Sinusoidal embedding of a flow time `t ∈ [0, 1]`.
///
/// Layout is `[sin(s·t·ω_0), …, sin(s·t·ω_{h-1}), cos(s·t·ω_0), …]` with
/// `h = dim / 2`, `ω_i = max_period^(-i/h)` and `s = scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinusoidalTimeEmbedding {
    pub dim: usize,
    pub max_period: f64,
    pub scale: f64,
}

impl SinusoidalTimeEmbedding {
    pub fn new(dim: usize, max_period: f64) -> Result<Self> {
        Self::with_scale(dim, max_period, 1.0)
    }

    pub fn with_scale(dim: usize, max_period: f64, scale: f64) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(TensorError::Contract(format!(
                "time embedding dim must be even and positive, got {dim}"
            )));
        }
        if !(max_period > 0.0) || !(scale > 0.0) {
            return Err(TensorError::Contract("time embedding period and scale must be positive".into()));
        }
        Ok(Self {
            dim,
            max_period,
            scale,
        })
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let half = self.dim / 2;
        (0..half)
            .map(|i| self.max_period.powf(-(i as f64) / half as f64))
            .collect()
    }

    pub fn embed(&self, t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(TensorError::Contract(format!("time {t} outside [0, 1]")));
        }
        let freqs = self.frequencies();
        let mut out = Vec::with_capacity(self.dim);
        out.extend(freqs.iter().map(|w| (self.scale * t * w).sin()));
        out.extend(freqs.iter().map(|w| (self.scale * t * w).cos()));
        Ok(out)
    }

    /// `[batch × dim]` embedding of one time per row.
    pub fn embed_batch(&self, ts: &[f64]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ts.len() * self.dim);
        for &t in ts {
            data.extend(self.embed(t)?);
        }
        Tensor::new(vec![ts.len(), self.dim], data)
    }
}
