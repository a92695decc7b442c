//! Video samples: synthetic generation, the on-disk sequence format, flow
//! angle conversion and long-sequence inference.

mod format;
mod synth;
mod window;

pub use format::{
    load_sequence, read_flo, read_pgm, read_ppm, save_sequence, write_flo, write_pgm, write_ppm,
    write_manifest, read_manifest, MANIFEST,
};
pub use synth::{generate_dataset, generate_video, ObjectSpec, ShapeKind, StopPattern, SynthConfig, SynthOptions};
pub use window::{sliding_window_infer, window_starts, WindowOutput};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One clip with per-frame ground truth.
///
/// `flow[t]` maps frame `t` to frame `t + 1`; the last entry repeats the
/// one before it.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub name: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub frames: Vec<Tensor>,
    /// `[2, H, W]` displacement `(dx, dy)` in pixels.
    pub flow: Vec<Tensor>,
    /// `[1, H, W]` with values in `{0, 1}`.
    pub masks: Vec<Tensor>,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width)` of the frames.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let f = self
            .frames
            .first()
            .ok_or_else(|| Error::Invalid(format!("video '{}' has no frames", self.name)))?;
        let (_, h, w) = f.dims3()?;
        Ok((h, w))
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.dims()?;
        let t = self.len();
        if self.flow.len() != t || self.masks.len() != t {
            return Err(Error::Invalid(format!(
                "video '{}': {t} frames, {} flow fields, {} masks",
                self.name,
                self.flow.len(),
                self.masks.len()
            )));
        }
        for i in 0..t {
            for (what, tensor, c) in [
                ("frame", &self.frames[i], 3),
                ("flow", &self.flow[i], 2),
                ("mask", &self.masks[i], 1),
            ] {
                if tensor.shape() != [c, h, w] {
                    return Err(Error::shape(
                        "video",
                        format!("{what} {i} is {:?}, expected [{c}, {h}, {w}]", tensor.shape()),
                    ));
                }
            }
            if !self.masks[i].data().iter().all(|&v| v == 0.0 || v == 1.0) {
                return Err(Error::Invalid(format!("mask {i} is not binary")));
            }
            if !self.flow[i].all_finite() {
                return Err(Error::NonFinite(format!("flow {i} of '{}'", self.name)));
            }
        }
        Ok(())
    }

    /// Flow-angle fields of every frame.
    pub fn flow_angles(&self) -> Vec<Tensor> {
        self.flow.iter().map(flow_to_angle).collect()
    }

    /// Frames `[start, start + len)` as a new sample.
    pub fn clip(&self, start: usize, len: usize) -> Result<VideoSample> {
        if len == 0 || start + len > self.len() {
            return Err(Error::Invalid(format!(
                "clip {start}+{len} out of {} frames",
                self.len()
            )));
        }
        let r = start..start + len;
        Ok(VideoSample {
            name: self.name.clone(),
            frames: self.frames[r.clone()].to_vec(),
            flow: self.flow[r.clone()].to_vec(),
            masks: self.masks[r].to_vec(),
        })
    }
}

/// Per-pixel `(sin θ, cos θ)` of the flow direction; `(0, 0)` where the
/// flow vanishes.
pub fn flow_to_angle(flow: &Tensor) -> Tensor {
    let [2, h, w] = flow.shape()[..] else {
        panic!("flow_to_angle expects [2, H, W], got {:?}", flow.shape());
    };
    let n = h * w;
    let (dx, dy) = flow.data().split_at(n);
    let mut out = vec![0.0f32; 2 * n];
    for i in 0..n {
        let (x, y) = (dx[i] as f64, dy[i] as f64);
        let mag = x.hypot(y);
        if mag > 1e-6 {
            out[i] = (y / mag) as f32;
            out[n + i] = (x / mag) as f32;
        }
    }
    Tensor::new(&[2, h, w], out).expect("shape preserved")
}

/// Block-majority downsampling of a `[1, H, W]` mask: a grid cell is set
/// when at least half of its `stride x stride` block is.
pub fn downsample_mask(mask: &Tensor, stride: usize) -> Result<Tensor> {
    let (c, h, w) = mask.dims3()?;
    if c != 1 || stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(
            "downsample_mask",
            format!("{:?} with stride {stride}", mask.shape()),
        ));
    }
    let (gh, gw) = (h / stride, w / stride);
    let d = mask.data();
    let half = (stride * stride) as f32 / 2.0;
    Ok(Tensor::from_fn(&[1, gh, gw], |i| {
        let (gy, gx) = (i / gw, i % gw);
        let mut s = 0.0;
        for y in gy * stride..(gy + 1) * stride {
            s += d[y * w + gx * stride..y * w + (gx + 1) * stride].iter().sum::<f32>();
        }
        if s >= half {
            1.0
        } else {
            0.0
        }
    }))
}

/// Nearest-neighbour downsampling: each grid cell takes the pixel at the
/// centre of its block.
pub fn downsample_nearest(mask: &Tensor, stride: usize) -> Result<Tensor> {
    let (c, h, w) = mask.dims3()?;
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(
            "downsample_nearest",
            format!("{:?} with stride {stride}", mask.shape()),
        ));
    }
    let (gh, gw) = (h / stride, w / stride);
    let d = mask.data();
    let off = stride / 2;
    Ok(Tensor::from_fn(&[c, gh, gw], |i| {
        let ch = i / (gh * gw);
        let (gy, gx) = ((i / gw) % gh, i % gw);
        d[(ch * h + gy * stride + off) * w + gx * stride + off]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow1(dx: f32, dy: f32) -> Tensor {
        Tensor::new(&[2, 1, 1], vec![dx, dy]).unwrap()
    }

    #[test]
    fn angle_axis_cases() {
        assert_eq!(flow_to_angle(&flow1(1.0, 0.0)).data(), &[0.0, 1.0]);
        assert_eq!(flow_to_angle(&flow1(0.0, 2.0)).data(), &[1.0, 0.0]);
        assert_eq!(flow_to_angle(&flow1(0.0, 0.0)).data(), &[0.0, 0.0]);
    }

    #[test]
    fn majority_downsample() {
        let m = Tensor::new(&[1, 2, 4], vec![1., 1., 0., 0., 0., 1., 0., 1.]).unwrap();
        assert_eq!(downsample_mask(&m, 2).unwrap().data(), &[1.0, 0.0]);
        assert!(downsample_mask(&m, 3).is_err());
    }

    #[test]
    fn nearest_downsample_picks_block_centre() {
        let m = Tensor::from_fn(&[1, 4, 4], |i| i as f32);
        assert_eq!(downsample_nearest(&m, 2).unwrap().data(), &[5.0, 7.0, 13.0, 15.0]);
    }
}
