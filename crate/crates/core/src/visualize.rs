//! Gate heatmaps and segmentation overlays written as PGM/PPM files.
//!
//! Heatmaps use a fixed mapping, activation 0 to byte 0 and 1 to byte 255
//! (rounded half up), so panels from different frames can be compared.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataio::{write_pgm, write_ppm};
use crate::error::{Error, Result};
use crate::recurrent::GateRecord;
use crate::tensor::{upsample_nearest, Tensor};

/// Overlay colour for object pixels.
pub const HIGHLIGHT: [f32; 3] = [1.0, 0.0, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateSignal {
    /// Reset gate `r`.
    Reset,
    /// Inverse update gate `1 - z`.
    InvUpdate,
    /// Hidden state, shown as `(h + 1) / 2`.
    State,
}

impl GateSignal {
    pub const ALL: [GateSignal; 3] = [GateSignal::Reset, GateSignal::InvUpdate, GateSignal::State];

    pub fn name(self) -> &'static str {
        match self {
            GateSignal::Reset => "r",
            GateSignal::InvUpdate => "inv_z",
            GateSignal::State => "h",
        }
    }

    fn extract(self, rec: &GateRecord<f32>) -> Tensor {
        match self {
            GateSignal::Reset => rec.r.clone(),
            GateSignal::InvUpdate => rec.z.map(|z| 1.0 - z),
            GateSignal::State => rec.h_new.map(|h| (h + 1.0) * 0.5),
        }
    }
}

impl fmt::Display for GateSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GateSignal {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        GateSignal::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown gate signal '{s}' (r, inv_z, h)")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeatmapSpec {
    pub channels: Vec<usize>,
    pub signals: Vec<GateSignal>,
    /// Integer upscaling of each heatmap.
    pub scale: usize,
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        HeatmapSpec {
            channels: vec![0],
            signals: vec![GateSignal::Reset, GateSignal::InvUpdate],
            scale: 1,
        }
    }
}

/// One heatmap, `[1, h*scale, w*scale]` with values in `[0, 1]`.
pub fn gate_heatmap(rec: &GateRecord<f32>, signal: GateSignal, channel: usize, scale: usize) -> Result<Tensor> {
    let map = signal.extract(rec);
    let (c, _, _) = map.dims3()?;
    if channel >= c {
        return Err(Error::Invalid(format!(
            "channel {channel} out of range for {c} state channels"
        )));
    }
    upsample_nearest(&map.slice_channels(channel, channel + 1)?, scale.max(1))
}

/// Writes `gate_<signal>_c<channel>_t<frame>.pgm` for every requested
/// combination and returns the paths in writing order.
pub fn render_gates(records: &[GateRecord<f32>], spec: &HeatmapSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if let Some(first) = records.first() {
        let (c, _, _) = first.z.dims3()?;
        if let Some(&bad) = spec.channels.iter().find(|&&ch| ch >= c) {
            return Err(Error::Invalid(format!(
                "channel {bad} out of range for {c} state channels"
            )));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::new();
    for (t, rec) in records.iter().enumerate() {
        for &signal in &spec.signals {
            for &ch in &spec.channels {
                let path = out_dir.join(format!("gate_{signal}_c{ch}_t{t}.pgm"));
                write_pgm(&path, &gate_heatmap(rec, signal, ch, spec.scale)?)?;
                paths.push(path);
            }
        }
    }
    Ok(paths)
}

/// Blends object pixels of `frame` toward [`HIGHLIGHT`]. A mask on a
/// coarser grid is upsampled by nearest neighbour first.
pub fn overlay_mask(frame: &Tensor, mask: &Tensor, alpha: f32) -> Result<Tensor> {
    let (c, h, w) = frame.dims3()?;
    let (mc, mh, mw) = mask.dims3()?;
    if c != 3 || mc != 1 || mh == 0 || h % mh != 0 || w % mw != 0 || h / mh != w / mw {
        return Err(Error::shape(
            "overlay_mask",
            format!("frame {:?} and mask {:?}", frame.shape(), mask.shape()),
        ));
    }
    let mask = upsample_nearest(mask, h / mh)?;
    let n = h * w;
    let m = mask.data();
    let src = frame.data();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (ch, p) = (i / n, i % n);
        if m[p] > 0.5 {
            (1.0 - alpha) * src[i] + alpha * HIGHLIGHT[ch]
        } else {
            src[i]
        }
    }))
}

/// Writes `overlay_t<frame>.ppm` into `out_dir`.
pub fn write_overlay(out_dir: &Path, t: usize, frame: &Tensor, mask: &Tensor, alpha: f32) -> Result<PathBuf> {
    let path = out_dir.join(format!("overlay_t{t}.ppm"));
    write_ppm(&path, &overlay_mask(frame, mask, alpha)?)?;
    Ok(path)
}
