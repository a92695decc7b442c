use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Sigmoid,
    Tanh,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    // keep the open interval (0, 1) even where the float result rounds to 1 or 0
    let hi = T::one() - T::epsilon() / T::lit(2.0);
    y.max(T::min_positive_value()).min(hi)
}

fn tanh<T: Scalar>(x: T) -> T {
    let hi = T::one() - T::epsilon() / T::lit(2.0);
    x.tanh().max(-hi).min(hi)
}

/// Elementwise sigmoid or tanh. Outputs stay strictly inside `(0, 1)` and
/// `(-1, 1)` respectively for every finite input.
pub fn pointwise<T: Scalar>(op: Pointwise, input: &Tensor<T>) -> Tensor<T> {
    match op {
        Pointwise::Sigmoid => input.map(sigmoid),
        Pointwise::Tanh => input.map(tanh),
    }
}

/// Backward of [`pointwise`], expressed through the forward *output*.
pub fn pointwise_backward<T: Scalar>(
    op: Pointwise,
    output: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<Tensor<T>> {
    match op {
        Pointwise::Sigmoid => output.zip_map(grad_output, |y, g| g * y * (T::one() - y)),
        Pointwise::Tanh => output.zip_map(grad_output, |y, g| g * (T::one() - y * y)),
    }
}

/// Per-pixel softmax over exactly two channels (background, object).
pub fn channel_softmax2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    if c != 2 {
        return Err(Error::shape(
            "channel_softmax2",
            format!("expected 2 channels, got {c}"),
        ));
    }
    let n = h * w;
    let (l0, l1) = input.data().split_at(n);
    let mut out = vec![T::zero(); 2 * n];
    for i in 0..n {
        let m = l0[i].max(l1[i]);
        let e0 = (l0[i] - m).exp();
        let e1 = (l1[i] - m).exp();
        let s = e0 + e1;
        out[i] = e0 / s;
        out[n + i] = e1 / s;
    }
    Tensor::new(&[2, h, w], out)
}

/// Channel concatenation: `a` fills channels `[0, Ca)`, `b` fills `[Ca, Ca+Cb)`.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ca, ha, wa) = a.dims3()?;
    let (cb, hb, wb) = b.dims3()?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("spatial mismatch {ha}x{wa} vs {hb}x{wb}"),
        ));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(&[ca + cb, ha, wa], data)
}

/// Routes a concatenated gradient back to its two sources.
pub fn concat_channels_backward<T: Scalar>(
    grad_output: &Tensor<T>,
    channels_a: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, _, _) = grad_output.dims3()?;
    Ok((
        grad_output.slice_channels(0, channels_a)?,
        grad_output.slice_channels(channels_a, c)?,
    ))
}

/// 2x2 average pooling.
pub fn downsample2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "downsample2",
            format!("extents must be even, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let base = (ch * h + 2 * y) * w + 2 * xo;
                let s = x[base] + x[base + 1] + x[base + w] + x[base + w + 1];
                out[(ch * oh + y) * ow + xo] = s * quarter;
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Backward of [`downsample2`]: each output gradient is spread equally over
/// its 2x2 cell.
pub fn downsample2_backward<T: Scalar>(grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, oh, ow) = grad_output.dims3()?;
    let (h, w) = (2 * oh, 2 * ow);
    let g = grad_output.data();
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = g[(ch * oh + y / 2) * ow + x / 2] * quarter;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    if factor == 0 {
        return Err(Error::Invalid("upsample factor must be positive".into()));
    }
    let (oh, ow) = (h * factor, w * factor);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                out.push(x[(ch * h + y / factor) * w + xo / factor]);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}
