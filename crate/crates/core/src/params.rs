//! Named collections of trainable tensors.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A fixed, ordered set of named tensors. The order of [`ParamSet::named`]
/// is stable and is the order used by optimizers and checkpoints.
pub trait ParamSet<T: Scalar> {
    fn named(&self) -> Vec<(String, &Tensor<T>)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Copy of `p` with every tensor zeroed; the natural gradient accumulator.
pub fn zeros_like<T: Scalar, P: ParamSet<T> + Clone>(p: &P) -> P {
    let mut out = p.clone();
    for (_, t) in out.named_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = T::zero());
    }
    out
}

/// `dst += src`, tensor by tensor.
pub fn accumulate<T: Scalar, P: ParamSet<T>>(dst: &mut P, src: &P) -> Result<()> {
    let src = src.named();
    let mut dst = dst.named_mut();
    if src.len() != dst.len() {
        return Err(Error::shape("accumulate", "parameter sets differ in size"));
    }
    for ((_, d), (_, s)) in dst.iter_mut().zip(src) {
        d.add_assign(s)?;
    }
    Ok(())
}

pub(crate) fn prefixed<'a, T: Scalar>(
    prefix: &str,
    items: Vec<(String, &'a Tensor<T>)>,
) -> Vec<(String, &'a Tensor<T>)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

pub(crate) fn prefixed_mut<'a, T: Scalar>(
    prefix: &str,
    items: Vec<(String, &'a mut Tensor<T>)>,
) -> Vec<(String, &'a mut Tensor<T>)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// Implements [`ParamSet`] for a struct whose parameters are plain
/// `Tensor<T>` fields.
macro_rules! tensor_fields {
    ($ty:ident { $($field:ident),+ $(,)? }) => {
        impl<T: $crate::tensor::Scalar> $crate::params::ParamSet<T> for $ty<T> {
            fn named(&self) -> Vec<(String, &$crate::tensor::Tensor<T>)> {
                vec![$((stringify!($field).to_string(), &self.$field)),+]
            }
            fn named_mut(&mut self) -> Vec<(String, &mut $crate::tensor::Tensor<T>)> {
                vec![$((stringify!($field).to_string(), &mut self.$field)),+]
            }
        }
    };
}
pub(crate) use tensor_fields;
