use rand::Rng;

use super::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Depthwise 1-D convolution followed by a pointwise (1×1) channel mix.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseSeparableConv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    /// `[in_channels × kernel_size]`
    pub depthwise: ParamId,
    /// `[in_channels × out_channels]`
    pub pointwise: ParamId,
    /// `[out_channels]`
    pub bias: ParamId,
}

impl DepthwiseSeparableConv1d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel_size == 0 {
            return Err(TensorError::Contract(
                "depthwise-separable conv extents must be positive".into(),
            ));
        }
        let depthwise = store.add_init(
            format!("{name}.depthwise"),
            &[in_channels, kernel_size],
            Init::Uniform(1.0 / (kernel_size as f64).sqrt()),
            rng,
        );
        let pointwise = store.add_init(
            format!("{name}.pointwise"),
            &[in_channels, out_channels],
            Init::Uniform(1.0 / (in_channels as f64).sqrt()),
            rng,
        );
        let bias = store.add_init(format!("{name}.bias"), &[out_channels], Init::Zeros, rng);
        Ok(Self {
            in_channels,
            out_channels,
            kernel_size,
            depthwise,
            pointwise,
            bias,
        })
    }

    /// Weights excluding bias: `C_in·K + C_in·C_out`.
    pub fn weight_count(in_channels: usize, out_channels: usize, kernel_size: usize) -> usize {
        in_channels * kernel_size + in_channels * out_channels
    }

    /// Weights of a dense conv with the same extents: `C_in·C_out·K`.
    pub fn dense_weight_count(in_channels: usize, out_channels: usize, kernel_size: usize) -> usize {
        in_channels * out_channels * kernel_size
    }

    /// `[batch × length × in] → [batch × length × out]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "dsconv",
                lhs: shape,
                rhs: vec![self.in_channels, self.kernel_size],
            });
        }
        let (batch, len) = (shape[0], shape[1]);
        let dw = tape.depthwise_conv1d(x, bound.get(self.depthwise))?;
        let flat = tape.reshape(dw, &[batch * len, self.in_channels])?;
        let mixed = tape.matmul(flat, bound.get(self.pointwise))?;
        let mixed = tape.add(mixed, bound.get(self.bias))?;
        tape.reshape(mixed, &[batch, len, self.out_channels])
    }

    /// Applies the layer to a single `[channels_in × length]` signal.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[0] != self.in_channels || x.shape()[1] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "dsconv",
                lhs: x.shape().to_vec(),
                rhs: vec![self.in_channels, self.kernel_size],
            });
        }
        let len = x.shape()[1];
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let xt = tape.transpose(xv)?;
        let xt = tape.reshape(xt, &[1, len, self.in_channels])?;
        let y = self.forward(&mut tape, &bound, xt)?;
        let y = tape.reshape(y, &[len, self.out_channels])?;
        let y = tape.transpose(y)?;
        Ok(tape.tensor(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(cin: usize, cout: usize, k: usize) -> (ParamStore, DepthwiseSeparableConv1d) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l = DepthwiseSeparableConv1d::new(&mut store, "conv", cin, cout, k, &mut rng).unwrap();
        (store, l)
    }

    #[test]
    fn identity_kernels_pass_through() {
        let (mut store, l) = layer(3, 3, 3);
        let mut dw = vec![0.0; 9];
        for c in 0..3 {
            dw[c * 3 + 1] = 1.0;
        }
        store.set("conv.depthwise", Tensor::matrix(3, 3, dw).unwrap()).unwrap();
        store.set("conv.pointwise", Tensor::identity(3)).unwrap();
        let x = Tensor::matrix(3, 5, (0..15).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let y = l.apply(&store, &x).unwrap();
        assert_eq!(y.shape(), &[3, 5]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(DepthwiseSeparableConv1d::weight_count(64, 64, 3), 4288);
        assert_eq!(DepthwiseSeparableConv1d::dense_weight_count(64, 64, 3), 12288);
        let (store, _) = layer(64, 64, 3);
        assert_eq!(store.numel(), 4288 + 64);
    }

    #[test]
    fn constant_input_constant_interior() {
        let (store, l) = layer(2, 3, 3);
        let x = Tensor::full(&[2, 7], 1.25);
        let y = l.apply(&store, &x).unwrap();
        for c in 0..3 {
            let row = &y.data()[c * 7..(c + 1) * 7];
            for p in 2..6 {
                assert!((row[p] - row[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_padding_keeps_length_for_even_kernels() {
        let (store, l) = layer(2, 2, 4);
        let y = l.apply(&store, &Tensor::full(&[2, 5], 1.0)).unwrap();
        assert_eq!(y.shape(), &[2, 5]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let (store, l) = layer(3, 2, 3);
        assert!(l.apply(&store, &Tensor::zeros(&[2, 4])).is_err());
    }
}
