//! Recurrent visual memory: ConvGRU and ConvRNN cells, sequence unrolling
//! with backpropagation through time, and the weight-shared bidirectional
//! wrapper. The memoryless conv stack used for ablations lives here too.

mod bidir;
mod gru;
mod rnn;
mod stack;

pub use bidir::{bidirectional_backward, bidirectional_run, BidirFuseParams, BidirGrads, BidirRun};
pub use gru::{gru_step, gru_step_backward, ConvGruParams, GateRecord, GruCache, GruState};
pub use rnn::{rnn_step, ConvRnnParams, RnnCache};
pub use stack::{gru_param_count, stack_param_count, ConvStackCache, ConvStackParams};

use crate::error::{Error, Result};
use crate::params::{accumulate, zeros_like, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// Gradients produced by one backward step of a cell.
#[derive(Debug, Clone)]
pub struct StepGrads<T, P> {
    pub x: Tensor<T>,
    pub h_prev: Tensor<T>,
    pub params: P,
}

/// A convolutional recurrent cell whose parameter struct is the cell itself.
pub trait RecurrentCell<T: Scalar>: ParamSet<T> + Clone {
    type Cache;

    fn input_channels(&self) -> usize;
    fn state_channels(&self) -> usize;
    fn step(&self, x: &Tensor<T>, h_prev: &Tensor<T>) -> Result<(Tensor<T>, Self::Cache)>;
    fn step_backward(&self, cache: &Self::Cache, grad_h: &Tensor<T>)
        -> Result<StepGrads<T, Self>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    /// Frame indices in processing order.
    pub fn order(self, len: usize) -> Box<dyn Iterator<Item = usize>> {
        match self {
            Direction::Forward => Box::new(0..len),
            Direction::Backward => Box::new((0..len).rev()),
        }
    }
}

/// Result of unrolling a cell. Both vectors are indexed by input frame,
/// whatever the processing direction. `caches` is empty unless requested.
#[derive(Debug, Clone)]
pub struct SequenceRun<T, C> {
    pub states: Vec<Tensor<T>>,
    pub caches: Vec<C>,
}

/// Unrolls `cell` over `xs` starting from `h0`.
pub fn run_sequence<T: Scalar, C: RecurrentCell<T>>(
    cell: &C,
    xs: &[Tensor<T>],
    h0: &Tensor<T>,
    direction: Direction,
    keep_caches: bool,
) -> Result<SequenceRun<T, C::Cache>> {
    if xs.is_empty() {
        return Err(Error::Invalid("run_sequence needs at least one frame".into()));
    }
    let mut states: Vec<Option<Tensor<T>>> = vec![None; xs.len()];
    let mut caches: Vec<Option<C::Cache>> = (0..xs.len()).map(|_| None).collect();
    let mut h = h0.clone();
    for t in direction.order(xs.len()) {
        let (h_new, cache) = cell.step(&xs[t], &h)?;
        if keep_caches {
            caches[t] = Some(cache);
        }
        states[t] = Some(h_new.clone());
        h = h_new;
    }
    Ok(SequenceRun {
        states: states.into_iter().map(|s| s.expect("every frame visited")).collect(),
        caches: if keep_caches {
            caches.into_iter().map(|c| c.expect("every frame visited")).collect()
        } else {
            Vec::new()
        },
    })
}

/// Gradients of an unrolled sequence.
#[derive(Debug, Clone)]
pub struct SequenceGrads<T, P> {
    pub xs: Vec<Tensor<T>>,
    pub h0: Tensor<T>,
    pub params: P,
}

/// Backpropagation through time. `grad_states[t]` is the loss gradient
/// arriving at the state of input frame `t` from outside the recurrence.
pub fn sequence_backward<T: Scalar, C: RecurrentCell<T>>(
    cell: &C,
    caches: &[C::Cache],
    grad_states: &[Tensor<T>],
    direction: Direction,
) -> Result<SequenceGrads<T, C>> {
    if caches.is_empty() || caches.len() != grad_states.len() {
        return Err(Error::Invalid(format!(
            "sequence_backward needs one cache per frame: {} caches, {} gradients",
            caches.len(),
            grad_states.len()
        )));
    }
    let len = caches.len();
    let mut params = zeros_like(cell);
    let mut xs: Vec<Option<Tensor<T>>> = vec![None; len];
    let mut carry = grad_states[0].zeros_like();
    let order: Vec<usize> = direction.order(len).collect();
    for &t in order.iter().rev() {
        let mut g = grad_states[t].clone();
        g.add_assign(&carry)?;
        let step = cell.step_backward(&caches[t], &g)?;
        accumulate(&mut params, &step.params)?;
        xs[t] = Some(step.x);
        carry = step.h_prev;
    }
    Ok(SequenceGrads {
        xs: xs.into_iter().map(|x| x.expect("every frame visited")).collect(),
        h0: carry,
        params,
    })
}
