//! Memoryless replacement for the recurrent cell: a per-frame stack of
//! same-padded convolutions with tanh after each layer.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{
    conv2d, conv2d_backward, pointwise, pointwise_backward, ConvSpec, Pointwise, Scalar, Tensor,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStackParams<T = f32> {
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> for ConvStackParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("w{i}"), w));
            out.push((format!("b{i}"), b));
        }
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.weights.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            out.push((format!("w{i}"), w));
            out.push((format!("b{i}"), b));
        }
        out
    }
}

/// Parameter count of a stack with the given layout.
pub fn stack_param_count(
    input_channels: usize,
    hidden: usize,
    output_channels: usize,
    kernel_size: usize,
    layers: usize,
) -> usize {
    let kk = kernel_size * kernel_size;
    let mut chans = vec![input_channels];
    chans.extend(std::iter::repeat(hidden).take(layers - 1));
    chans.push(output_channels);
    chans.windows(2).map(|w| w[0] * w[1] * kk + w[1]).sum()
}

/// ConvGRU parameter count for the same channel layout.
pub fn gru_param_count(input_channels: usize, state_channels: usize, kernel_size: usize) -> usize {
    let kk = kernel_size * kernel_size;
    3 * state_channels * (input_channels + state_channels) * kk + 3 * state_channels
}

/// Cached activations of one frame.
#[derive(Debug, Clone)]
pub struct ConvStackCache<T = f32> {
    inputs: Vec<Tensor<T>>,
    outputs: Vec<Tensor<T>>,
}

impl<T: Scalar> ConvStackParams<T> {
    pub fn zeros(
        input_channels: usize,
        hidden: usize,
        output_channels: usize,
        kernel_size: usize,
        layers: usize,
    ) -> Self {
        assert!(layers >= 2, "stack needs at least two layers");
        let mut chans = vec![input_channels];
        chans.extend(std::iter::repeat(hidden).take(layers - 1));
        chans.push(output_channels);
        let weights = chans
            .windows(2)
            .map(|w| Tensor::zeros(&[w[1], w[0], kernel_size, kernel_size]))
            .collect();
        let biases = chans[1..].iter().map(|&c| Tensor::zeros(&[c])).collect();
        ConvStackParams { weights, biases }
    }

    /// Picks the hidden width whose total parameter count is closest to
    /// `target` (ties go to the narrower stack).
    pub fn matched_width(
        input_channels: usize,
        output_channels: usize,
        kernel_size: usize,
        layers: usize,
        target: usize,
    ) -> usize {
        (1..=4 * (input_channels + output_channels).max(8))
            .min_by_key(|&w| {
                stack_param_count(input_channels, w, output_channels, kernel_size, layers)
                    .abs_diff(target)
            })
            .expect("non-empty range")
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvStackCache<T>)> {
        if self.weights.is_empty() {
            return Err(Error::Invalid("empty conv stack".into()));
        }
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut outputs = Vec::with_capacity(self.weights.len());
        let mut h = x.clone();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let spec = ConvSpec::same(w.shape()[2]);
            let y = pointwise(Pointwise::Tanh, &conv2d(&h, w, Some(b), &spec)?);
            inputs.push(h);
            outputs.push(y.clone());
            h = y;
        }
        Ok((h, ConvStackCache { inputs, outputs }))
    }

    pub fn backward(
        &self,
        cache: &ConvStackCache<T>,
        grad_output: &Tensor<T>,
    ) -> Result<(Tensor<T>, ConvStackParams<T>)> {
        let mut grads = self.clone();
        let mut g = grad_output.clone();
        for i in (0..self.weights.len()).rev() {
            let spec = ConvSpec::same(self.weights[i].shape()[2]);
            let da = pointwise_backward(Pointwise::Tanh, &cache.outputs[i], &g)?;
            let cg = conv2d_backward(&cache.inputs[i], &self.weights[i], &spec, &da, true)?;
            grads.weights[i] = cg.kernel;
            grads.biases[i] = cg.bias;
            g = cg.input.expect("requested");
        }
        Ok((g, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_agree_with_tensors() {
        let s = ConvStackParams::<f32>::zeros(17, 16, 16, 3, 6);
        assert_eq!(s.num_params(), stack_param_count(17, 16, 16, 3, 6));
        let g = crate::recurrent::ConvGruParams::<f32>::zeros(17, 16, 3);
        assert_eq!(g.num_params(), gru_param_count(17, 16, 3));
    }

    #[test]
    fn matched_width_is_closest() {
        let target = gru_param_count(17, 16, 3);
        let w = ConvStackParams::<f32>::matched_width(17, 16, 3, 6, target);
        let best = stack_param_count(17, w, 16, 3, 6).abs_diff(target);
        for other in 1..64 {
            assert!(stack_param_count(17, other, 16, 3, 6).abs_diff(target) >= best);
        }
    }
}
