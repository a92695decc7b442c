//! Dense tensors and the differentiable primitives every layer is built from.
//!
//! Layouts are row-major: `[C, H, W]` for feature maps and `[Cout, Cin, K, K]`
//! for convolution kernels. Sequences are passed around as slices of
//! `[C, H, W]` frames; [`stack`] and [`Tensor::unstack`] convert to and from
//! the `[T, C, H, W]` form.

mod conv;
mod ops;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use conv::{conv2d, conv2d_backward, conv2d_direct, conv_invocations, ConvGrads, ConvSpec};
pub use ops::{
    channel_softmax2, concat_channels, concat_channels_backward, downsample2, downsample2_backward,
    pointwise, pointwise_backward, upsample_nearest, Pointwise,
};

/// Element type tag used by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn from_tag(tag: u8) -> Option<DType> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element type. Training runs in `f32`; `f64` exists for
/// finite-difference gradient checks.
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits in scalar")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// `c (+)= op(a) * op(b)` for row-major buffers, where `op` optionally
/// transposes. `a` is `m x k` after `op`, `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "matmul lhs size");
    assert_eq!(b.len(), k * n, "matmul rhs size");
    assert_eq!(c.len(), m * n, "matmul out size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: buffer lengths were checked above against the strides used.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense row-major tensor of rank 1 to 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::shape(
            "tensor",
            format!("rank must be 1..=4, got shape {shape:?}"),
        ));
    }
    if shape.contains(&0) {
        return Err(Error::shape(
            "tensor",
            format!("extents must be positive, got {shape:?}"),
        ));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} needs {n} elements, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(C, H, W)` of a rank-3 feature map.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(
                "dims3",
                format!("expected [C,H,W], got {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} to {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape("zip_map", other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len()).expect("len fits")
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64().expect("finite")).expect("castable"))
                .collect(),
        }
    }

    /// Channels `[start, end)` of a `[C, H, W]` map.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        if start >= end || end > c {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{end} out of {c} channels"),
            ));
        }
        let plane = h * w;
        Ok(Tensor {
            shape: vec![end - start, h, w],
            data: self.data[start * plane..end * plane].to_vec(),
        })
    }

    /// Horizontal mirror of a `[C, H, W]` map.
    pub fn flip_horizontal(&self) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        let mut out = self.data.clone();
        for ch in 0..c {
            for y in 0..h {
                let row = (ch * h + y) * w;
                out[row..row + w].reverse();
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Spatial window `[y0, y0+h) x [x0, x0+w)` of a `[C, H, W]` map.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let (c, ih, iw) = self.dims3()?;
        if h == 0 || w == 0 || y0 + h > ih || x0 + w > iw {
            return Err(Error::shape(
                "crop",
                format!("window {h}x{w} at ({y0},{x0}) exceeds {ih}x{iw}"),
            ));
        }
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in y0..y0 + h {
                let row = (ch * ih + y) * iw;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Ok(Tensor {
            shape: vec![c, h, w],
            data,
        })
    }

    /// Split a `[T, C, H, W]` sequence into `T` frames.
    pub fn unstack(&self) -> Result<Vec<Self>> {
        let [t, c, h, w] = self.shape[..] else {
            return Err(Error::shape(
                "unstack",
                format!("expected [T,C,H,W], got {:?}", self.shape),
            ));
        };
        let n = c * h * w;
        Ok((0..t)
            .map(|i| Tensor {
                shape: vec![c, h, w],
                data: self.data[i * n..(i + 1) * n].to_vec(),
            })
            .collect())
    }

    fn expect_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }
}

/// Stack equally shaped `[C, H, W]` frames into `[T, C, H, W]`.
pub fn stack<T: Scalar>(frames: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::shape("stack", "empty sequence"))?;
    let (c, h, w) = first.dims3()?;
    let mut data = Vec::with_capacity(frames.len() * first.len());
    for f in frames {
        if f.shape() != first.shape() {
            return Err(Error::shape(
                "stack",
                format!("{:?} vs {:?}", f.shape(), first.shape()),
            ));
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(&[frames.len(), c, h, w], data)
}
