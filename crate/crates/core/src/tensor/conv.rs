use std::borrow::Cow;
use std::cell::Cell;

use super::{matmul, Scalar, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static CONV_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`conv2d`] invocations made on the current thread so far.
pub fn conv_invocations() -> u64 {
    CONV_CALLS.with(|c| c.get())
}

/// Square convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub padding: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn new(kernel_size: usize, padding: usize, stride: usize) -> Result<Self> {
        if kernel_size == 0 || kernel_size % 2 == 0 {
            return Err(Error::Invalid(format!(
                "kernel size must be odd and positive, got {kernel_size}"
            )));
        }
        if stride == 0 {
            return Err(Error::Invalid("stride must be positive".into()));
        }
        Ok(ConvSpec {
            kernel_size,
            padding,
            stride,
        })
    }

    /// Stride 1 with padding `(k - 1) / 2`, so output extent equals input.
    pub fn same(kernel_size: usize) -> Self {
        assert!(kernel_size % 2 == 1, "same conv needs odd kernel");
        ConvSpec {
            kernel_size,
            padding: (kernel_size - 1) / 2,
            stride: 1,
        }
    }

    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel_size {
            return None;
        }
        Some((padded - self.kernel_size) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_size == 1 && self.padding == 0 && self.stride == 1
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ho: usize,
    wo: usize,
}

fn geometry<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Geometry> {
    let (cin, h, w) = input.dims3()?;
    let [cout, kcin, kh, kw] = kernel.shape()[..] else {
        return Err(Error::shape(
            op,
            format!("kernel must be [Cout,Cin,K,K], got {:?}", kernel.shape()),
        ));
    };
    if kcin != cin {
        return Err(Error::shape(
            op,
            format!("kernel expects {kcin} input channels, input has {cin}"),
        ));
    }
    if kh != spec.kernel_size || kw != spec.kernel_size {
        return Err(Error::shape(
            op,
            format!(
                "kernel is {kh}x{kw} but spec says {}x{}",
                spec.kernel_size, spec.kernel_size
            ),
        ));
    }
    let (Some(ho), Some(wo)) = (spec.output_extent(h), spec.output_extent(w)) else {
        return Err(Error::shape(
            op,
            format!("non-positive output extent for {h}x{w} input and {spec:?}"),
        ));
    };
    Ok(Geometry {
        cin,
        h,
        w,
        cout,
        ho,
        wo,
    })
}

fn im2col<'a, T: Scalar>(input: &'a Tensor<T>, g: &Geometry, spec: &ConvSpec) -> Cow<'a, [T]> {
    if spec.is_pointwise() {
        return Cow::Borrowed(input.data());
    }
    let k = spec.kernel_size;
    let pad = spec.padding as isize;
    let stride = spec.stride;
    let n = g.ho * g.wo;
    let src = input.data();
    let mut cols = vec![T::zero(); g.cin * k * k * n];
    for ci in 0..g.cin {
        let plane = &src[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                let dst = &mut cols[row..row + n];
                for oy in 0..g.ho {
                    let iy = (oy * stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Cow::Owned(cols)
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry, spec: &ConvSpec) -> Vec<T> {
    if spec.is_pointwise() {
        return cols.to_vec();
    }
    let k = spec.kernel_size;
    let pad = spec.padding as isize;
    let stride = spec.stride;
    let n = g.ho * g.wo;
    let mut out = vec![T::zero(); g.cin * g.h * g.w];
    for ci in 0..g.cin {
        let plane = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                let src = &cols[row..row + n];
                for oy in 0..g.ho {
                    let iy = (oy * stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                op,
                format!("bias must be [{cout}], got {:?}", b.shape()),
            ));
        }
    }
    Ok(())
}

/// 2-D cross-correlation of a `[Cin, H, W]` map with a `[Cout, Cin, K, K]`
/// kernel, lowered to a single matrix product over unfolded patches.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = geometry("conv2d", input, kernel, spec)?;
    check_bias("conv2d", bias, g.cout)?;
    CONV_CALLS.with(|c| c.set(c.get() + 1));

    let n = g.ho * g.wo;
    let kk = g.cin * spec.kernel_size * spec.kernel_size;
    let cols = im2col(input, &g, spec);
    let mut out = vec![T::zero(); g.cout * n];
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_mut(n).zip(b.data()) {
            row.iter_mut().for_each(|v| *v = bv);
        }
    }
    matmul(g.cout, kk, n, kernel.data(), false, &cols, false, &mut out, bias.is_some());
    Tensor::new(&[g.cout, g.ho, g.wo], out)
}

/// Reference convolution written as plain nested loops. Used as the oracle
/// for [`conv2d`]; far too slow for training.
pub fn conv2d_direct<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = geometry("conv2d_direct", input, kernel, spec)?;
    check_bias("conv2d_direct", bias, g.cout)?;
    let k = spec.kernel_size;
    let x = input.data();
    let wgt = kernel.data();
    let mut out = vec![T::zero(); g.cout * g.ho * g.wo];
    for co in 0..g.cout {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut acc = bias.map_or(T::zero(), |b| b.data()[co]);
                for ci in 0..g.cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                continue;
                            }
                            let xv = x[(ci * g.h + iy as usize) * g.w + ix as usize];
                            let wv = wgt[((co * g.cin + ci) * k + ky) * k + kx];
                            acc = acc + xv * wv;
                        }
                    }
                }
                out[(co * g.ho + oy) * g.wo + ox] = acc;
            }
        }
    }
    Tensor::new(&[g.cout, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] with respect to its three inputs.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Backward pass of [`conv2d`]. When `want_input` is false the input
/// gradient (the most expensive part for first layers) is skipped.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: &ConvSpec,
    grad_output: &Tensor<T>,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let g = geometry("conv2d_backward", input, kernel, spec)?;
    if grad_output.shape() != [g.cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_output must be [{}, {}, {}], got {:?}",
                g.cout,
                g.ho,
                g.wo,
                grad_output.shape()
            ),
        ));
    }
    let n = g.ho * g.wo;
    let kk = g.cin * spec.kernel_size * spec.kernel_size;
    let go = grad_output.data();

    let bias: Vec<T> = go.chunks(n).map(|row| row.iter().copied().sum()).collect();

    let cols = im2col(input, &g, spec);
    let mut gk = vec![T::zero(); g.cout * kk];
    matmul(g.cout, n, kk, go, false, &cols, true, &mut gk, false);

    let grad_input = if want_input {
        let mut gcols = vec![T::zero(); kk * n];
        matmul(kk, g.cout, n, kernel.data(), true, go, false, &mut gcols, false);
        Some(Tensor::new(&[g.cin, g.h, g.w], col2im(&gcols, &g, spec))?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: grad_input,
        kernel: Tensor::new(kernel.shape(), gk)?,
        bias: Tensor::new(&[g.cout], bias)?,
    })
}
