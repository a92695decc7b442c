use super::{run_sequence, sequence_backward, Direction, RecurrentCell, SequenceRun};
use crate::error::{Error, Result};
use crate::params::{accumulate, tensor_fields};
use crate::tensor::{
    concat_channels, concat_channels_backward, conv2d, conv2d_backward, pointwise,
    pointwise_backward, ConvSpec, Pointwise, Scalar, Tensor,
};

/// 3x3 convolution mapping the concatenated `[h_fwd; h_bwd]` (forward half
/// first) back to `d_h` channels. A tanh follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct BidirFuseParams<T = f32> {
    pub w_fuse: Tensor<T>,
    pub b_fuse: Tensor<T>,
}

tensor_fields!(BidirFuseParams { w_fuse, b_fuse });

impl<T: Scalar> BidirFuseParams<T> {
    pub fn zeros(state_channels: usize) -> Self {
        BidirFuseParams {
            w_fuse: Tensor::zeros(&[state_channels, 2 * state_channels, 3, 3]),
            b_fuse: Tensor::zeros(&[state_channels]),
        }
    }

    fn fuse(&self, concat: &Tensor<T>) -> Result<Tensor<T>> {
        let a = conv2d(concat, &self.w_fuse, Some(&self.b_fuse), &ConvSpec::same(3))?;
        Ok(pointwise(Pointwise::Tanh, &a))
    }
}

#[derive(Debug, Clone)]
pub struct BidirRun<T, C> {
    pub forward: SequenceRun<T, C>,
    pub backward: SequenceRun<T, C>,
    /// Fused per-frame features `[d_h, H, W]`.
    pub outputs: Vec<Tensor<T>>,
    concat: Vec<Tensor<T>>,
}

/// Runs one weight-shared cell forward and backward in time and fuses the
/// two state sequences frame by frame.
pub fn bidirectional_run<T: Scalar, C: RecurrentCell<T>>(
    cell: &C,
    fuse: &BidirFuseParams<T>,
    xs: &[Tensor<T>],
    h0_fwd: &Tensor<T>,
    h0_bwd: &Tensor<T>,
    keep_caches: bool,
) -> Result<BidirRun<T, C::Cache>> {
    let dh = cell.state_channels();
    if fuse.w_fuse.shape() != [dh, 2 * dh, 3, 3] {
        return Err(Error::shape(
            "bidirectional_run",
            format!("fuse kernel {:?} for {dh} state channels", fuse.w_fuse.shape()),
        ));
    }
    let forward = run_sequence(cell, xs, h0_fwd, Direction::Forward, keep_caches)?;
    let backward = run_sequence(cell, xs, h0_bwd, Direction::Backward, keep_caches)?;
    let mut outputs = Vec::with_capacity(xs.len());
    let mut concat = Vec::new();
    for (hf, hb) in forward.states.iter().zip(&backward.states) {
        let c = concat_channels(hf, hb)?;
        outputs.push(fuse.fuse(&c)?);
        if keep_caches {
            concat.push(c);
        }
    }
    Ok(BidirRun {
        forward,
        backward,
        outputs,
        concat,
    })
}

#[derive(Debug, Clone)]
pub struct BidirGrads<T, C> {
    pub xs: Vec<Tensor<T>>,
    pub cell: C,
    pub fuse: BidirFuseParams<T>,
    pub h0_fwd: Tensor<T>,
    pub h0_bwd: Tensor<T>,
}

/// Backward of [`bidirectional_run`]; the shared cell receives the sum of
/// both directions' gradients.
pub fn bidirectional_backward<T: Scalar, C: RecurrentCell<T>>(
    cell: &C,
    fuse: &BidirFuseParams<T>,
    run: &BidirRun<T, C::Cache>,
    grad_outputs: &[Tensor<T>],
) -> Result<BidirGrads<T, C>> {
    if run.concat.len() != grad_outputs.len() || run.forward.caches.len() != grad_outputs.len() {
        return Err(Error::Invalid(
            "bidirectional_backward needs a run made with keep_caches".into(),
        ));
    }
    let dh = cell.state_channels();
    let spec = ConvSpec::same(3);
    let mut fuse_grads = BidirFuseParams::zeros(dh);
    let mut g_fwd = Vec::with_capacity(grad_outputs.len());
    let mut g_bwd = Vec::with_capacity(grad_outputs.len());
    for ((c, out), g) in run.concat.iter().zip(&run.outputs).zip(grad_outputs) {
        let da = pointwise_backward(Pointwise::Tanh, out, g)?;
        let cg = conv2d_backward(c, &fuse.w_fuse, &spec, &da, true)?;
        fuse_grads.w_fuse.add_assign(&cg.kernel)?;
        fuse_grads.b_fuse.add_assign(&cg.bias)?;
        let (gf, gb) = concat_channels_backward(cg.input.as_ref().expect("requested"), dh)?;
        g_fwd.push(gf);
        g_bwd.push(gb);
    }
    let fwd = sequence_backward(cell, &run.forward.caches, &g_fwd, Direction::Forward)?;
    let bwd = sequence_backward(cell, &run.backward.caches, &g_bwd, Direction::Backward)?;
    let mut cell_grads = fwd.params;
    accumulate(&mut cell_grads, &bwd.params)?;
    let mut xs = fwd.xs;
    for (x, b) in xs.iter_mut().zip(&bwd.xs) {
        x.add_assign(b)?;
    }
    Ok(BidirGrads {
        xs,
        cell: cell_grads,
        fuse: fuse_grads,
        h0_fwd: fwd.h0,
        h0_bwd: bwd.h0,
    })
}
