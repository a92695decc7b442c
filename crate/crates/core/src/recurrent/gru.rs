//! Convolutional GRU cell.
//!
//! ```text
//! z_t  = sigmoid(x_t * w_xz + h_{t-1} * w_hz + b_z)
//! r_t  = sigmoid(x_t * w_xr + h_{t-1} * w_hr + b_r)
//! h~_t = tanh(x_t * w_xh + (r_t . h_{t-1}) * w_hh + b_h)
//! h_t  = (1 - z_t) . h_{t-1} + z_t . h~_t
//! ```
//!
//! where `*` is a same-padded convolution and `.` is elementwise product.
//! Six convolutions per step.

use super::{RecurrentCell, StepGrads};
use crate::error::{Error, Result};
use crate::params::tensor_fields;
use crate::tensor::{
    conv2d, conv2d_backward, pointwise, pointwise_backward, ConvSpec, Pointwise, Scalar, Tensor,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGruParams<T = f32> {
    pub w_xz: Tensor<T>,
    pub w_hz: Tensor<T>,
    pub w_xr: Tensor<T>,
    pub w_hr: Tensor<T>,
    pub w_xh: Tensor<T>,
    pub w_hh: Tensor<T>,
    pub b_z: Tensor<T>,
    pub b_r: Tensor<T>,
    pub b_h: Tensor<T>,
}

tensor_fields!(ConvGruParams {
    w_xz, w_hz, w_xr, w_hr, w_xh, w_hh, b_z, b_r, b_h
});

impl<T: Scalar> ConvGruParams<T> {
    pub fn zeros(input_channels: usize, state_channels: usize, kernel_size: usize) -> Self {
        let wx = [state_channels, input_channels, kernel_size, kernel_size];
        let wh = [state_channels, state_channels, kernel_size, kernel_size];
        ConvGruParams {
            w_xz: Tensor::zeros(&wx),
            w_hz: Tensor::zeros(&wh),
            w_xr: Tensor::zeros(&wx),
            w_hr: Tensor::zeros(&wh),
            w_xh: Tensor::zeros(&wx),
            w_hh: Tensor::zeros(&wh),
            b_z: Tensor::zeros(&[state_channels]),
            b_r: Tensor::zeros(&[state_channels]),
            b_h: Tensor::zeros(&[state_channels]),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.w_xz.shape()[2]
    }

    fn spec(&self) -> ConvSpec {
        ConvSpec::same(self.kernel_size())
    }

    /// Checks that all kernels agree on kernel size and channel counts.
    pub fn validate(&self) -> Result<()> {
        let dh = self.w_xz.shape()[0];
        let cx = self.w_xz.shape()[1];
        let k = self.kernel_size();
        for w in [&self.w_xz, &self.w_xr, &self.w_xh] {
            if w.shape() != [dh, cx, k, k] {
                return Err(Error::shape("ConvGruParams", format!("input kernel {:?}", w.shape())));
            }
        }
        for w in [&self.w_hz, &self.w_hr, &self.w_hh] {
            if w.shape() != [dh, dh, k, k] {
                return Err(Error::shape("ConvGruParams", format!("state kernel {:?}", w.shape())));
            }
        }
        for b in [&self.b_z, &self.b_r, &self.b_h] {
            if b.shape() != [dh] {
                return Err(Error::shape("ConvGruParams", format!("bias {:?}", b.shape())));
            }
        }
        Ok(())
    }
}

/// The memory state `h_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruState<T = f32> {
    pub h: Tensor<T>,
}

impl<T: Scalar> GruState<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        GruState {
            h: Tensor::zeros(&[channels, height, width]),
        }
    }
}

/// Gate activations of one step, kept for visualisation and analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct GateRecord<T = f32> {
    pub z: Tensor<T>,
    pub r: Tensor<T>,
    pub h_cand: Tensor<T>,
    pub h_new: Tensor<T>,
}

/// Forward values needed to backpropagate through one step.
#[derive(Debug, Clone)]
pub struct GruCache<T = f32> {
    pub x: Tensor<T>,
    pub h_prev: Tensor<T>,
    pub rh: Tensor<T>,
    pub record: GateRecord<T>,
}

fn check_inputs<T: Scalar>(x: &Tensor<T>, h: &Tensor<T>, p: &ConvGruParams<T>) -> Result<()> {
    let (cx, hx, wx) = x.dims3()?;
    let (ch, hh, wh) = h.dims3()?;
    if (hx, wx) != (hh, wh) {
        return Err(Error::shape(
            "gru_step",
            format!("input is {hx}x{wx} but state is {hh}x{wh}"),
        ));
    }
    let [dh, pcx, _, _] = p.w_xz.shape()[..] else {
        unreachable!("validated kernel rank")
    };
    if cx != pcx || ch != dh {
        return Err(Error::shape(
            "gru_step",
            format!("params expect {pcx} input / {dh} state channels, got {cx} / {ch}"),
        ));
    }
    Ok(())
}

fn step_cached<T: Scalar>(
    p: &ConvGruParams<T>,
    x: &Tensor<T>,
    h_prev: &Tensor<T>,
) -> Result<GruCache<T>> {
    check_inputs(x, h_prev, p)?;
    let spec = p.spec();
    let a_z = conv2d(x, &p.w_xz, Some(&p.b_z), &spec)?.add(&conv2d(h_prev, &p.w_hz, None, &spec)?)?;
    let z = pointwise(Pointwise::Sigmoid, &a_z);
    let a_r = conv2d(x, &p.w_xr, Some(&p.b_r), &spec)?.add(&conv2d(h_prev, &p.w_hr, None, &spec)?)?;
    let r = pointwise(Pointwise::Sigmoid, &a_r);
    let rh = r.mul(h_prev)?;
    let a_h = conv2d(x, &p.w_xh, Some(&p.b_h), &spec)?.add(&conv2d(&rh, &p.w_hh, None, &spec)?)?;
    let h_cand = pointwise(Pointwise::Tanh, &a_h);

    let mut h_new = h_prev.clone();
    for ((hn, &zv), &cv) in h_new.data_mut().iter_mut().zip(z.data()).zip(h_cand.data()) {
        *hn = (T::one() - zv) * *hn + zv * cv;
    }
    Ok(GruCache {
        x: x.clone(),
        h_prev: h_prev.clone(),
        rh,
        record: GateRecord { z, r, h_cand, h_new },
    })
}

/// One ConvGRU update.
pub fn gru_step<T: Scalar>(
    x: &Tensor<T>,
    h_prev: &GruState<T>,
    params: &ConvGruParams<T>,
) -> Result<(GruState<T>, GateRecord<T>)> {
    let cache = step_cached(params, x, &h_prev.h)?;
    Ok((
        GruState {
            h: cache.record.h_new.clone(),
        },
        cache.record,
    ))
}

/// Backward of one ConvGRU update through both paths into `h_{t-1}`.
pub fn gru_step_backward<T: Scalar>(
    params: &ConvGruParams<T>,
    cache: &GruCache<T>,
    grad_h_new: &Tensor<T>,
) -> Result<StepGrads<T, ConvGruParams<T>>> {
    let GateRecord { z, r, h_cand, .. } = &cache.record;
    let h_prev = &cache.h_prev;
    if grad_h_new.shape() != h_prev.shape() {
        return Err(Error::shape(
            "gru_step_backward",
            format!("gradient {:?} vs state {:?}", grad_h_new.shape(), h_prev.shape()),
        ));
    }
    let spec = params.spec();
    let one = T::one();

    let g = grad_h_new.data();
    let n = g.len();
    let mut d_z = vec![T::zero(); n];
    let mut d_cand = vec![T::zero(); n];
    let mut d_h = vec![T::zero(); n];
    for i in 0..n {
        let zv = z.data()[i];
        d_z[i] = g[i] * (h_cand.data()[i] - h_prev.data()[i]);
        d_cand[i] = g[i] * zv;
        d_h[i] = g[i] * (one - zv);
    }
    let shape = h_prev.shape();
    let d_z = Tensor::new(shape, d_z)?;
    let d_cand = Tensor::new(shape, d_cand)?;
    let mut d_h = Tensor::new(shape, d_h)?;

    // candidate memory
    let d_ah = pointwise_backward(Pointwise::Tanh, h_cand, &d_cand)?;
    let gx_h = conv2d_backward(&cache.x, &params.w_xh, &spec, &d_ah, true)?;
    let grh = conv2d_backward(&cache.rh, &params.w_hh, &spec, &d_ah, true)?;
    let d_rh = grh.input.expect("requested");
    d_h.add_assign(&d_rh.mul(r)?)?;
    let d_r = d_rh.mul(h_prev)?;

    // reset gate
    let d_ar = pointwise_backward(Pointwise::Sigmoid, r, &d_r)?;
    let gx_r = conv2d_backward(&cache.x, &params.w_xr, &spec, &d_ar, true)?;
    let gh_r = conv2d_backward(h_prev, &params.w_hr, &spec, &d_ar, true)?;
    d_h.add_assign(gh_r.input.as_ref().expect("requested"))?;

    // update gate
    let d_az = pointwise_backward(Pointwise::Sigmoid, z, &d_z)?;
    let gx_z = conv2d_backward(&cache.x, &params.w_xz, &spec, &d_az, true)?;
    let gh_z = conv2d_backward(h_prev, &params.w_hz, &spec, &d_az, true)?;
    d_h.add_assign(gh_z.input.as_ref().expect("requested"))?;

    let mut d_x = gx_h.input.expect("requested");
    d_x.add_assign(gx_r.input.as_ref().expect("requested"))?;
    d_x.add_assign(gx_z.input.as_ref().expect("requested"))?;

    Ok(StepGrads {
        x: d_x,
        h_prev: d_h,
        params: ConvGruParams {
            w_xz: gx_z.kernel,
            w_hz: gh_z.kernel,
            w_xr: gx_r.kernel,
            w_hr: gh_r.kernel,
            w_xh: gx_h.kernel,
            w_hh: grh.kernel,
            b_z: gx_z.bias,
            b_r: gx_r.bias,
            b_h: gx_h.bias,
        },
    })
}

impl<T: Scalar> RecurrentCell<T> for ConvGruParams<T> {
    type Cache = GruCache<T>;

    fn input_channels(&self) -> usize {
        self.w_xz.shape()[1]
    }

    fn state_channels(&self) -> usize {
        self.w_xz.shape()[0]
    }

    fn step(&self, x: &Tensor<T>, h_prev: &Tensor<T>) -> Result<(Tensor<T>, GruCache<T>)> {
        let cache = step_cached(self, x, h_prev)?;
        Ok((cache.record.h_new.clone(), cache))
    }

    fn step_backward(
        &self,
        cache: &GruCache<T>,
        grad_h: &Tensor<T>,
    ) -> Result<StepGrads<T, Self>> {
        gru_step_backward(self, cache, grad_h)
    }
}
