use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Stage};
use super::container;
use super::generate::{integrate, prior_draws};
use super::{PipelineError, Result};
use crate::io::{self, IoError};
use crate::solvers::{SolverConfig, SolverKind};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RFLOWPR\0";

/// Largest tolerated share of samples the solver may give up on.
pub const MAX_SKIP_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub vocab: usize,
    pub seq_len: usize,
}

/// Stored couplings `(x1, x̂0, tokens)` produced by one model.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub dim: usize,
    pub condition: Option<TokenLayout>,
    pub fingerprint: String,
    pub generator: Stage,
    pub solver: SolverConfig,
    pub seed: u64,
    pub requested: usize,
    pub skipped: usize,
    pub x1: Tensor,
    pub x0_hat: Tensor,
    pub tokens: Option<Vec<Vec<usize>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dim: usize,
    condition: Option<TokenLayout>,
    fingerprint: String,
    generator: Stage,
    solver: SolverConfig,
    seed: u64,
    requested: usize,
    skipped: usize,
    count: usize,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.x1.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn record_width(dim: usize, condition: Option<TokenLayout>) -> usize {
        2 * dim + condition.map_or(0, |c| c.seq_len)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            dim: self.dim,
            condition: self.condition,
            fingerprint: self.fingerprint.clone(),
            generator: self.generator,
            solver: self.solver.clone(),
            seed: self.seed,
            requested: self.requested,
            skipped: self.skipped,
            count: self.len(),
        };
        let mut payload = Vec::with_capacity(self.len() * Self::record_width(self.dim, self.condition));
        for i in 0..self.len() {
            payload.extend_from_slice(self.x1.row(i));
            payload.extend_from_slice(self.x0_hat.row(i));
            if let Some(t) = &self.tokens {
                payload.extend(t[i].iter().map(|&v| v as f64));
            }
        }
        container::encode(MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let (h, payload): (Header, Vec<f64>) = container::decode(MAGIC, bytes)?;
        let width = Self::record_width(h.dim, h.condition);
        if payload.len() != width * h.count {
            return Err(format!("expected {} records of width {width}", h.count));
        }
        let mut x1 = Vec::with_capacity(h.count * h.dim);
        let mut x0 = Vec::with_capacity(h.count * h.dim);
        let mut tokens = h.condition.map(|_| Vec::with_capacity(h.count));
        for rec in payload.chunks_exact(width.max(1)) {
            x1.extend_from_slice(&rec[..h.dim]);
            x0.extend_from_slice(&rec[h.dim..2 * h.dim]);
            if let (Some(all), Some(layout)) = (tokens.as_mut(), h.condition) {
                let seq = rec[2 * h.dim..]
                    .iter()
                    .map(|&v| {
                        let t = v as usize;
                        if t as f64 == v && t < layout.vocab {
                            Ok(t)
                        } else {
                            Err(format!("invalid token {v}"))
                        }
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                all.push(seq);
            }
        }
        Ok(Self {
            dim: h.dim,
            condition: h.condition,
            fingerprint: h.fingerprint,
            generator: h.generator,
            solver: h.solver,
            seed: h.seed,
            requested: h.requested,
            skipped: h.skipped,
            x1: Tensor::new(vec![h.count, h.dim], x1).map_err(|e| e.to_string())?,
            x0_hat: Tensor::new(vec![h.count, h.dim], x0).map_err(|e| e.to_string())?,
            tokens,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::atomic_write(path, &self.to_bytes())?;
        Ok(())
    }

    /// Loads a pair file, refusing one produced by a model other than the
    /// one fingerprinted `expected`.
    pub fn load(path: &Path, expected: Option<&str>) -> Result<Self> {
        if !path.exists() {
            return Err(PipelineError::Missing(format!("pair set {}", path.display())));
        }
        let bytes = io::read(path)?;
        let set = Self::from_bytes(&bytes).map_err(|m| IoError::format(path, m))?;
        if let Some(expected) = expected {
            set.check_source(expected)?;
        }
        Ok(set)
    }

    pub fn check_source(&self, fingerprint: &str) -> Result<()> {
        if self.fingerprint == fingerprint {
            Ok(())
        } else {
            Err(PipelineError::FingerprintMismatch {
                expected: fingerprint.into(),
                found: self.fingerprint.clone(),
            })
        }
    }

    pub fn rows(&self, idx: &[usize]) -> (Tensor, Tensor, Option<Vec<Vec<usize>>>) {
        (
            self.x1.select_rows(idx),
            self.x0_hat.select_rows(idx),
            self.tokens.as_ref().map(|t| idx.iter().map(|&i| t[i].clone()).collect()),
        )
    }
}

/// Integrates `n` fresh noise draws (with conditions from the prior) through
/// the checkpoint's model with an adaptive solver.
///
/// Samples the solver gives up on are dropped and counted; more than
/// [`MAX_SKIP_FRACTION`] of them fails the stage.
pub fn generate_pairs(source: &Checkpoint, n: usize, solver: &SolverConfig, seed: u64) -> Result<PairSet> {
    if solver.kind != SolverKind::Rk45 {
        return Err(PipelineError::Config("pair generation needs the rk45 solver".into()));
    }
    let dist = &source.config.dataset;
    let (x1, tokens) = prior_draws(dist, n, seed);
    let g = integrate(&source.model, &x1, tokens.as_deref(), solver, true)?;
    let keep: Vec<usize> = (0..n).filter(|&i| g.ok[i]).collect();
    let skipped = n - keep.len();
    if skipped as f64 > MAX_SKIP_FRACTION * n as f64 {
        return Err(PipelineError::TooManySkipped { skipped, requested: n });
    }
    Ok(PairSet {
        dim: dist.dim(),
        condition: dist.token_layout().map(|(vocab, seq_len)| TokenLayout { vocab, seq_len }),
        fingerprint: source.model.fingerprint(),
        generator: source.stage,
        solver: solver.clone(),
        seed,
        requested: n,
        skipped,
        x1: g.x1.select_rows(&keep),
        x0_hat: g.x0.select_rows(&keep),
        tokens: g.tokens.map(|t| keep.iter().map(|&i| t[i].clone()).collect()),
    })
}
