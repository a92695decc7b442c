//! Appearance and motion encoders, stream fusion and the segmentation head.
//!
//! Both encoders are two-layer convolutional stubs: a 3x3 convolution at
//! input resolution, average pooling down to the feature grid (stride `s`,
//! a power of two), and a second 3x3 convolution on the grid. The
//! appearance stub ends in tanh, the motion stub in a sigmoid giving a
//! per-pixel motion likelihood.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{
    channel_softmax2, concat_channels, conv2d, conv2d_backward, downsample2, downsample2_backward,
    pointwise, pointwise_backward, ConvSpec, Pointwise, Scalar, Tensor,
};

/// Average-pools `[C, H, W]` by `stride` (a power of two).
pub fn pool_to_grid<T: Scalar>(input: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    check_stride(stride)?;
    let (_, h, w) = input.dims3()?;
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(
            "pool_to_grid",
            format!("{h}x{w} is not divisible by stride {stride}"),
        ));
    }
    let mut out = input.clone();
    let mut s = stride;
    while s > 1 {
        out = downsample2(&out)?;
        s /= 2;
    }
    Ok(out)
}

fn pool_backward<T: Scalar>(grad: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let mut g = grad.clone();
    let mut s = stride;
    while s > 1 {
        g = downsample2_backward(&g)?;
        s /= 2;
    }
    Ok(g)
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 0 || !stride.is_power_of_two() {
        return Err(Error::Invalid(format!(
            "feature stride must be a power of two, got {stride}"
        )));
    }
    Ok(())
}

/// Two-layer convolutional encoder shared by both streams.
#[derive(Debug, Clone, PartialEq)]
pub struct StubParams<T = f32> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub stride: usize,
}

impl<T: Scalar> ParamSet<T> for StubParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
        ]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("w1".into(), &mut self.w1),
            ("b1".into(), &mut self.b1),
            ("w2".into(), &mut self.w2),
            ("b2".into(), &mut self.b2),
        ]
    }
}

/// Appearance stub: RGB `[3, H, W]` to `[d_app, H/s, W/s]`.
pub type AppearanceParams<T = f32> = StubParams<T>;
/// Motion stub: flow angle `[2, H, W]` to likelihood `[1, H/s, W/s]`.
pub type MotionParams<T = f32> = StubParams<T>;

impl<T: Scalar> StubParams<T> {
    pub fn zeros(input_channels: usize, mid: usize, output: usize, stride: usize) -> Self {
        StubParams {
            w1: Tensor::zeros(&[mid, input_channels, 3, 3]),
            b1: Tensor::zeros(&[mid]),
            w2: Tensor::zeros(&[output, mid, 3, 3]),
            b2: Tensor::zeros(&[output]),
            stride,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn output_channels(&self) -> usize {
        self.w2.shape()[0]
    }

    fn encode(&self, input: &Tensor<T>, last: Pointwise) -> Result<(Tensor<T>, StubCache<T>)> {
        let (c, _, _) = input.dims3()?;
        if c != self.input_channels() {
            return Err(Error::shape(
                "encode",
                format!("expected {} input channels, got {c}", self.input_channels()),
            ));
        }
        let spec = ConvSpec::same(3);
        let a1 = pointwise(Pointwise::Tanh, &conv2d(input, &self.w1, Some(&self.b1), &spec)?);
        let pooled = pool_to_grid(&a1, self.stride)?;
        let out = pointwise(last, &conv2d(&pooled, &self.w2, Some(&self.b2), &spec)?);
        Ok((
            out.clone(),
            StubCache {
                input: input.clone(),
                a1,
                pooled,
                out,
                last,
            },
        ))
    }

    /// Gradient of the stub's parameters given the gradient on its
    /// pre-activation output (before the final tanh/sigmoid).
    pub fn backward_preact(&self, cache: &StubCache<T>, grad_pre: &Tensor<T>) -> Result<StubParams<T>> {
        let spec = ConvSpec::same(3);
        let g2 = conv2d_backward(&cache.pooled, &self.w2, &spec, grad_pre, true)?;
        let g_a1 = pool_backward(g2.input.as_ref().expect("requested"), self.stride)?;
        let da1 = pointwise_backward(Pointwise::Tanh, &cache.a1, &g_a1)?;
        let g1 = conv2d_backward(&cache.input, &self.w1, &spec, &da1, false)?;
        Ok(StubParams {
            w1: g1.kernel,
            b1: g1.bias,
            w2: g2.kernel,
            b2: g2.bias,
            stride: self.stride,
        })
    }

    /// Gradient of the stub's parameters given the gradient on its output.
    pub fn backward(&self, cache: &StubCache<T>, grad_out: &Tensor<T>) -> Result<StubParams<T>> {
        let pre = pointwise_backward(cache.last, &cache.out, grad_out)?;
        self.backward_preact(cache, &pre)
    }
}

/// Forward activations of one stub evaluation.
#[derive(Debug, Clone)]
pub struct StubCache<T = f32> {
    input: Tensor<T>,
    a1: Tensor<T>,
    pooled: Tensor<T>,
    out: Tensor<T>,
    last: Pointwise,
}

impl<T: Scalar> StubCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.out
    }
}

/// Appearance features of one frame, values in `(-1, 1)`.
pub fn appearance_encode<T: Scalar>(
    frame: &Tensor<T>,
    params: &AppearanceParams<T>,
) -> Result<(Tensor<T>, StubCache<T>)> {
    params.encode(frame, Pointwise::Tanh)
}

/// Motion likelihood of one frame from its `(sin, cos)` flow-angle field.
pub fn motion_encode<T: Scalar>(
    flow_angle: &Tensor<T>,
    params: &MotionParams<T>,
) -> Result<(Tensor<T>, StubCache<T>)> {
    let (c, _, _) = flow_angle.dims3()?;
    if c != 2 {
        return Err(Error::shape(
            "motion_encode",
            format!("flow angle must have 2 channels, got {c}"),
        ));
    }
    params.encode(flow_angle, Pointwise::Sigmoid)
}

/// ConvGRU input: appearance channels first, motion channel last.
pub fn fuse_streams<T: Scalar>(app: &Tensor<T>, motion: &Tensor<T>) -> Result<Tensor<T>> {
    let (cm, _, _) = motion.dims3()?;
    if cm != 1 {
        return Err(Error::shape(
            "fuse_streams",
            format!("motion map must have 1 channel, got {cm}"),
        ));
    }
    concat_channels(app, motion)
}

/// 1x1 convolution from memory features to two logits.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T = f32> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

crate::params::tensor_fields!(HeadParams { w, b });

impl<T: Scalar> HeadParams<T> {
    pub fn zeros(channels: usize) -> Self {
        HeadParams {
            w: Tensor::zeros(&[2, channels, 1, 1]),
            b: Tensor::zeros(&[2]),
        }
    }

    pub fn logits(&self, feature: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(feature, &self.w, Some(&self.b), &ConvSpec::same(1))
    }

    /// Returns the feature gradient and the head's parameter gradient.
    pub fn backward(
        &self,
        feature: &Tensor<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<(Tensor<T>, HeadParams<T>)> {
        let g = conv2d_backward(feature, &self.w, &ConvSpec::same(1), grad_logits, true)?;
        Ok((
            g.input.expect("requested"),
            HeadParams {
                w: g.kernel,
                b: g.bias,
            },
        ))
    }
}

/// Per-pixel `(background, object)` probabilities.
pub fn segment_head<T: Scalar>(feature: &Tensor<T>, params: &HeadParams<T>) -> Result<Tensor<T>> {
    channel_softmax2(&params.logits(feature)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_params_zero_features() {
        let p = AppearanceParams::<f32>::zeros(3, 4, 8, 4);
        let (f, _) = appearance_encode(&Tensor::zeros(&[3, 64, 64]), &p).unwrap();
        assert_eq!(f.shape(), &[8, 16, 16]);
        assert_eq!(f.max_abs(), 0.0);
    }

    #[test]
    fn zero_motion_params_half_likelihood() {
        let p = MotionParams::<f32>::zeros(2, 4, 1, 4);
        let angle = Tensor::from_fn(&[2, 64, 64], |i| (i as f32).sin());
        let (m, _) = motion_encode(&angle, &p).unwrap();
        assert_eq!(m.shape(), &[1, 16, 16]);
        assert!(m.data().iter().all(|&v| v == 0.5));
        assert!(motion_encode(&Tensor::zeros(&[3, 64, 64]), &p).is_err());
    }

    #[test]
    fn indivisible_extent_rejected() {
        let p = AppearanceParams::<f32>::zeros(3, 4, 8, 4);
        assert!(appearance_encode(&Tensor::zeros(&[3, 30, 32]), &p).is_err());
        assert!(pool_to_grid(&Tensor::<f32>::zeros(&[1, 8, 8]), 3).is_err());
    }

    #[test]
    fn fuse_ordering() {
        let app = Tensor::<f32>::new(&[2, 1, 1], vec![0.1, 0.2]).unwrap();
        let m = Tensor::new(&[1, 1, 1], vec![0.9]).unwrap();
        let x = fuse_streams(&app, &m).unwrap();
        assert_eq!(x.data(), &[0.1, 0.2, 0.9]);
        assert_eq!(x.slice_channels(0, 2).unwrap(), app);
        assert_eq!(x.slice_channels(2, 3).unwrap(), m);
    }

    #[test]
    fn head_cases() {
        let feat = Tensor::<f32>::from_fn(&[4, 3, 3], |i| i as f32 * 0.1 - 1.0);
        let mut h = HeadParams::zeros(4);
        let p = segment_head(&feat, &h).unwrap();
        assert!(p.slice_channels(1, 2).unwrap().data().iter().all(|&v| v == 0.5));
        h.b = Tensor::new(&[2], vec![0.0, 20.0]).unwrap();
        let p = segment_head(&feat, &h).unwrap();
        assert!(p.slice_channels(1, 2).unwrap().data().iter().all(|&v| v > 0.999));
    }
}
