//! Layers and the conditional velocity networks built from them.

mod dsconv;
mod embedding;
mod encoder;
mod layers;
mod params;
mod velocity;

pub use dsconv::DepthwiseSeparableConv1d;
pub use embedding::SinusoidalTimeEmbedding;
pub use encoder::{ConditionEncoder, EncoderConfig};
pub use layers::Linear;
pub use params::{Bound, ParamId, ParamStore};
pub use velocity::{VelocityConfig, VelocityModel};

use sha2::{Digest, Sha256};

use crate::tensor::{Result, Tensor};

/// A velocity network together with the encoder that produces its condition.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub velocity: VelocityModel,
    pub encoder: Option<ConditionEncoder>,
}

impl FlowModel {
    pub fn unconditional(velocity: VelocityModel) -> Self {
        Self {
            velocity,
            encoder: None,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.velocity.config().data_dim
    }

    /// Condition vectors for a batch, or `None` for unconditional models.
    pub fn condition(&self, tokens: Option<&[Vec<usize>]>) -> Result<Option<Tensor>> {
        match (&self.encoder, tokens) {
            (Some(enc), Some(tokens)) => enc.encode(tokens).map(Some),
            (None, None) => Ok(None),
            (Some(_), None) => Err(crate::tensor::TensorError::Contract(
                "conditional model needs token sequences".into(),
            )),
            (None, Some(_)) => Err(crate::tensor::TensorError::Contract(
                "unconditional model was given token sequences".into(),
            )),
        }
    }

    /// Hex digest over configuration and exact parameter bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let cfg = serde_json::to_string(self.velocity.config()).unwrap_or_default();
        h.update(cfg.as_bytes());
        hash_store(&mut h, self.velocity.params());
        if let Some(enc) = &self.encoder {
            let cfg = serde_json::to_string(enc.config()).unwrap_or_default();
            h.update(cfg.as_bytes());
            hash_store(&mut h, enc.params());
        }
        hex::encode(&h.finalize()[..16])
    }
}

fn hash_store(h: &mut Sha256, store: &ParamStore) {
    for (name, t) in store.iter() {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
}
