//! Inference over sequences longer than the training unroll.

use super::VideoSample;
use crate::error::{Error, Result};
use crate::model::{threshold_mask, ForwardOptions, GateTrace, ModelParams};
use crate::tensor::Tensor;

/// Window start frames: multiples of `step` below `len - window`, then a
/// final window ending at the last frame.
pub fn window_starts(len: usize, window: usize, step: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let last = len - window;
    let mut starts: Vec<usize> = (0..).map(|k| k * step).take_while(|&s| s < last).collect();
    starts.push(last);
    starts
}

#[derive(Debug, Clone)]
pub struct WindowOutput {
    /// Object probability `[1, h, w]` per frame on the feature grid.
    pub probs: Vec<Tensor>,
    pub masks: Vec<Tensor>,
    pub starts: Vec<usize>,
    /// How many windows covered each frame.
    pub coverage: Vec<usize>,
    /// Gate activations per frame, taken from the first window covering it.
    pub gates: Option<GateTrace<f32>>,
}

/// Runs the model window by window and averages object probabilities where
/// windows overlap.
pub fn sliding_window_infer(
    params: &ModelParams,
    sample: &VideoSample,
    window: usize,
    step: usize,
    record_gates: bool,
) -> Result<WindowOutput> {
    if step == 0 || window < step {
        return Err(Error::Invalid(format!(
            "need window >= step >= 1, got window {window}, step {step}"
        )));
    }
    let len = sample.len();
    let starts = window_starts(len, window, step);
    let opts = ForwardOptions {
        record_gates,
        keep_caches: false,
    };
    if starts == [0] {
        let pass = params.forward_video(sample, opts)?;
        let probs = pass.object_probs();
        return Ok(WindowOutput {
            masks: probs.iter().map(threshold_mask).collect(),
            probs,
            starts,
            coverage: vec![1; len],
            gates: pass.gates,
        });
    }

    let mut sums: Vec<Option<Tensor>> = vec![None; len];
    let mut coverage = vec![0usize; len];
    let mut fwd = vec![None; len];
    let mut bwd = vec![None; len];
    for &s in &starts {
        let clip = sample.clip(s, window)?;
        let pass = params.forward_video(&clip, opts)?;
        for (k, p) in pass.object_probs().into_iter().enumerate() {
            let t = s + k;
            coverage[t] += 1;
            sums[t] = Some(match sums[t].take() {
                Some(acc) => acc.add(&p)?,
                None => p,
            });
        }
        if let Some(g) = pass.gates {
            for (k, r) in g.forward.into_iter().enumerate() {
                fwd[s + k].get_or_insert(r);
            }
            for (k, r) in g.backward.into_iter().enumerate() {
                bwd[s + k].get_or_insert(r);
            }
        }
    }
    let probs = sums
        .into_iter()
        .zip(&coverage)
        .map(|(p, &c)| p.expect("every frame covered").map(|v| v / c as f32))
        .collect::<Vec<_>>();
    let gates = record_gates.then(|| GateTrace {
        forward: fwd.into_iter().flatten().collect(),
        backward: bwd.into_iter().flatten().collect(),
    });
    Ok(WindowOutput {
        masks: probs.iter().map(threshold_mask).collect(),
        probs,
        starts,
        coverage,
        gates,
    })
}
