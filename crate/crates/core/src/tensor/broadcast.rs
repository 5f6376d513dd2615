//! Numpy-style broadcasting helpers.

use super::{Result, TensorError};

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Maps flat indices of `out` onto flat indices of a source broadcast into it.
#[derive(Debug, Clone)]
pub(crate) enum IndexMap {
    Same,
    /// Source repeats with period `n` (source shape is a suffix of the output).
    Cyclic(usize),
    General { out_shape: Vec<usize>, strides: Vec<usize> },
}

impl IndexMap {
    pub(crate) fn new(src: &[usize], out: &[usize]) -> Self {
        if src == out {
            return IndexMap::Same;
        }
        let n: usize = src.iter().product();
        let lead = out.len() - src.len();
        let trailing_match = src
            .iter()
            .enumerate()
            .skip_while(|(_, &d)| d == 1)
            .all(|(i, &d)| d == out[lead + i]);
        if trailing_match {
            return IndexMap::Cyclic(n.max(1));
        }
        let mut strides = vec![0; out.len()];
        let mut acc = 1;
        for i in (0..src.len()).rev() {
            if src[i] != 1 {
                strides[lead + i] = acc;
            }
            acc *= src[i];
        }
        IndexMap::General {
            out_shape: out.to_vec(),
            strides,
        }
    }

    /// Source index for every output index, in output order.
    pub(crate) fn indices(&self, out_len: usize) -> Vec<usize> {
        match self {
            IndexMap::Same => (0..out_len).collect(),
            IndexMap::Cyclic(n) => (0..out_len).map(|i| i % n).collect(),
            IndexMap::General { out_shape, strides } => {
                let rank = out_shape.len();
                let mut counter = vec![0usize; rank];
                let mut idx = 0usize;
                let mut res = Vec::with_capacity(out_len);
                for _ in 0..out_len {
                    res.push(idx);
                    for d in (0..rank).rev() {
                        counter[d] += 1;
                        idx += strides[d];
                        if counter[d] < out_shape[d] {
                            break;
                        }
                        idx -= strides[d] * counter[d];
                        counter[d] = 0;
                    }
                }
                res
            }
        }
    }
}

/// Sums `grad` (shaped like the broadcast output) back onto a source buffer.
pub(crate) fn reduce_into(map: &IndexMap, grad: &[f64], target: &mut [f64], sign: f64) {
    match map {
        IndexMap::Same => {
            for (t, g) in target.iter_mut().zip(grad) {
                *t += sign * g;
            }
        }
        IndexMap::Cyclic(n) => {
            for chunk in grad.chunks(*n) {
                for (t, g) in target.iter_mut().zip(chunk) {
                    *t += sign * g;
                }
            }
        }
        general => {
            for (g, i) in grad.iter().zip(general.indices(grad.len())) {
                target[i] += sign * g;
            }
        }
    }
}
