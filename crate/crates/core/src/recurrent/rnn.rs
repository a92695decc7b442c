//! Plain convolutional RNN: `h_t = tanh(x_t * w_x + h_{t-1} * w_h + b)`.

use super::{RecurrentCell, StepGrads};
use crate::error::{Error, Result};
use crate::params::tensor_fields;
use crate::tensor::{
    conv2d, conv2d_backward, pointwise, pointwise_backward, ConvSpec, Pointwise, Scalar, Tensor,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvRnnParams<T = f32> {
    pub w_x: Tensor<T>,
    pub w_h: Tensor<T>,
    pub b: Tensor<T>,
}

tensor_fields!(ConvRnnParams { w_x, w_h, b });

impl<T: Scalar> ConvRnnParams<T> {
    pub fn zeros(input_channels: usize, state_channels: usize, kernel_size: usize) -> Self {
        ConvRnnParams {
            w_x: Tensor::zeros(&[state_channels, input_channels, kernel_size, kernel_size]),
            w_h: Tensor::zeros(&[state_channels, state_channels, kernel_size, kernel_size]),
            b: Tensor::zeros(&[state_channels]),
        }
    }

    fn spec(&self) -> ConvSpec {
        ConvSpec::same(self.w_x.shape()[2])
    }
}

#[derive(Debug, Clone)]
pub struct RnnCache<T = f32> {
    pub x: Tensor<T>,
    pub h_prev: Tensor<T>,
    pub h_new: Tensor<T>,
}

/// One ConvRNN update.
pub fn rnn_step<T: Scalar>(
    x: &Tensor<T>,
    h_prev: &Tensor<T>,
    params: &ConvRnnParams<T>,
) -> Result<Tensor<T>> {
    Ok(params.step(x, h_prev)?.0)
}

impl<T: Scalar> RecurrentCell<T> for ConvRnnParams<T> {
    type Cache = RnnCache<T>;

    fn input_channels(&self) -> usize {
        self.w_x.shape()[1]
    }

    fn state_channels(&self) -> usize {
        self.w_x.shape()[0]
    }

    fn step(&self, x: &Tensor<T>, h_prev: &Tensor<T>) -> Result<(Tensor<T>, RnnCache<T>)> {
        let (_, hx, wx) = x.dims3()?;
        let (_, hh, wh) = h_prev.dims3()?;
        if (hx, wx) != (hh, wh) {
            return Err(Error::shape(
                "rnn_step",
                format!("input is {hx}x{wx} but state is {hh}x{wh}"),
            ));
        }
        let spec = self.spec();
        let a = conv2d(x, &self.w_x, Some(&self.b), &spec)?
            .add(&conv2d(h_prev, &self.w_h, None, &spec)?)?;
        let h_new = pointwise(Pointwise::Tanh, &a);
        Ok((
            h_new.clone(),
            RnnCache {
                x: x.clone(),
                h_prev: h_prev.clone(),
                h_new,
            },
        ))
    }

    fn step_backward(&self, cache: &RnnCache<T>, grad_h: &Tensor<T>) -> Result<StepGrads<T, Self>> {
        let spec = self.spec();
        let da = pointwise_backward(Pointwise::Tanh, &cache.h_new, grad_h)?;
        let gx = conv2d_backward(&cache.x, &self.w_x, &spec, &da, true)?;
        let gh = conv2d_backward(&cache.h_prev, &self.w_h, &spec, &da, true)?;
        Ok(StepGrads {
            x: gx.input.expect("requested"),
            h_prev: gh.input.expect("requested"),
            params: ConvRnnParams {
                w_x: gx.kernel,
                w_h: gh.kernel,
                b: gx.bias,
            },
        })
    }
}
